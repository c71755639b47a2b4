use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{EmbeddingMatrix, SoftmaxFamily};
use crate::numerics::Tensor;

use super::{ModelConfig, StreamMode, GATE_BIAS_INIT, INIT_STD};

/// Parameters of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    pub w_gate: Tensor,
    pub b_gate: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
}

pub(crate) const LAYER_PARAM_NAMES: [&str; 14] = [
    "ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_gate", "b_gate", "w_out", "b_out", "ln2_g", "ln2_b",
    "w_fc", "b_fc", "w_proj", "b_proj",
];

impl LayerParams {
    fn tensors(&self) -> [&Tensor; 14] {
        [
            &self.ln1_g, &self.ln1_b, &self.w_qkv, &self.b_qkv, &self.w_gate, &self.b_gate,
            &self.w_out, &self.b_out, &self.ln2_g, &self.ln2_b, &self.w_fc, &self.b_fc,
            &self.w_proj, &self.b_proj,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 14] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.w_qkv, &mut self.b_qkv,
            &mut self.w_gate, &mut self.b_gate, &mut self.w_out, &mut self.b_out,
            &mut self.ln2_g, &mut self.ln2_b, &mut self.w_fc, &mut self.b_fc,
            &mut self.w_proj, &mut self.b_proj,
        ]
    }
}

/// All trainable parameters of one model. The token embedding `wte` doubles
/// as the output projection of every readout head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    pub wte: Tensor,
    pub wpe: Tensor,
    pub layers: Vec<LayerParams>,
    pub head_ln_g: Tensor,
    pub head_ln_b: Tensor,
}

impl ModelState {
    /// Seeded initialization. Every variant derived from one base config
    /// draws exactly the same numbers, so the factorial cells start equal.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d, ctx) = (config.vocab_size, config.d_model, config.context_length);
        let f = config.ffn_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("fixed std is valid");
        let mut draw = |shape: &[usize]| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::from_parts(shape.to_vec(), data)
        };
        let wte = draw(&[v, d]);
        let wpe = draw(&[ctx, d]);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                ln1_g: Tensor::filled(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                w_qkv: draw(&[d, 3 * d]),
                b_qkv: Tensor::zeros(&[3 * d]),
                w_gate: draw(&[d, d]),
                b_gate: Tensor::filled(&[d], GATE_BIAS_INIT),
                w_out: draw(&[d, d]),
                b_out: Tensor::zeros(&[d]),
                ln2_g: Tensor::filled(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                w_fc: draw(&[d, f]),
                b_fc: Tensor::zeros(&[f]),
                w_proj: draw(&[f, d]),
                b_proj: Tensor::zeros(&[d]),
            });
        }
        Ok(ModelState {
            config: config.clone(),
            wte,
            wpe,
            layers,
            head_ln_g: Tensor::filled(&[d], 1.0),
            head_ln_b: Tensor::zeros(&[d]),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Identifier used to tag representations: the factorial cell name.
    pub fn model_id(&self) -> &'static str {
        match (self.config.stream_mode, self.config.aux_loss) {
            (StreamMode::Cascade, true) => "cascade_aux",
            (StreamMode::Cascade, false) => "cascade_control",
            (StreamMode::Single, true) => "single_aux",
            (StreamMode::Single, false) => "single_control",
        }
    }

    /// Reinterprets the same parameters under another config with the same
    /// shapes (e.g. to evaluate the control objective on aux weights).
    pub fn with_config(mut self, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let same_shape = config.n_layers == self.config.n_layers
            && config.d_model == self.config.d_model
            && config.n_heads == self.config.n_heads
            && config.vocab_size == self.config.vocab_size
            && config.context_length == self.config.context_length;
        if !same_shape {
            return Err(Error::Validation(
                "config changes parameter shapes; cannot rebind state".into(),
            ));
        }
        self.config = config;
        Ok(self)
    }

    pub fn embedding(&self) -> EmbeddingMatrix {
        EmbeddingMatrix::new(self.wte.clone()).expect("embedding stays finite and V >= 2")
    }

    pub fn family(&self) -> SoftmaxFamily {
        SoftmaxFamily::new(self.embedding())
    }

    /// Parameters in checkpoint order, with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("wte".to_string(), &self.wte), ("wpe".to_string(), &self.wpe)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_PARAM_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("head_ln_g".to_string(), &self.head_ln_g));
        out.push(("head_ln_b".to_string(), &self.head_ln_b));
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.wte, &mut self.wpe];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.head_ln_g);
        out.push(&mut self.head_ln_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn param_norm(&self) -> f64 {
        self.params()
            .iter()
            .flat_map(|t| t.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|t| t.all_finite())
    }
}
