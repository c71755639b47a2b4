use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Readout, Representation};
use crate::numerics::{GradTape, Tensor, Var};

use super::state::ModelState;
use super::StreamMode;

/// Equal-length token sequences with their next-token targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl Batch {
    pub fn new(tokens: Vec<Vec<usize>>, targets: Vec<Vec<usize>>) -> Result<Self> {
        if tokens.is_empty() || tokens[0].is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let t = tokens[0].len();
        if tokens.len() != targets.len()
            || tokens.iter().chain(&targets).any(|s| s.len() != t)
        {
            return Err(Error::Contract(
                "batch sequences and targets must all share one length".into(),
            ));
        }
        Ok(Batch { tokens, targets })
    }

    pub fn n_seq(&self) -> usize {
        self.tokens.len()
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    /// SHA-256 over the token ids, used to check that runs saw the same data.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for seq in self.tokens.iter().chain(&self.targets) {
            for &t in seq {
                h.update((t as u64).to_le_bytes());
            }
            h.update(u64::MAX.to_le_bytes());
        }
        hex::encode(&h.finalize())
    }
}

/// Everything a forward pass exposes. Matrices are `(n_seq·T)×·` with
/// sequences stacked along rows; index `ℓ` refers to the stream after
/// block `ℓ`.
#[derive(Clone, Debug)]
pub struct ForwardRecord {
    pub model_id: String,
    pub n_seq: usize,
    pub seq_len: usize,
    /// Cascade only: the frozen lexical stream `W_E[t]`.
    pub token_stream: Option<Tensor>,
    /// Cascade only: the contextual stream after each block.
    pub contextual: Vec<Tensor>,
    /// `x^(ℓ)`; in cascade mode exactly `token_stream + contextual[ℓ]`.
    pub combined: Vec<Tensor>,
    /// `LN_head(x^(ℓ))`, the `λ` handed to the geometry code.
    pub normed: Vec<Tensor>,
    /// `z^(ℓ) = λ^(ℓ) W_Eᵀ`.
    pub logits: Vec<Tensor>,
}

impl ForwardRecord {
    pub fn n_layers(&self) -> usize {
        self.combined.len()
    }

    /// Logits of the output head (the last block's readout).
    pub fn final_logits(&self) -> &Tensor {
        self.logits.last().expect("at least two layers")
    }

    fn layer_index(&self, readout: Readout) -> Result<usize> {
        match readout {
            Readout::Final => Ok(self.n_layers() - 1),
            Readout::Layer(l) if l < self.n_layers() => Ok(l),
            Readout::Layer(l) => Err(Error::Contract(format!(
                "layer {l} out of range for a {}-layer model",
                self.n_layers()
            ))),
        }
    }

    /// `λ` at `position` of the first sequence.
    pub fn representation_at(&self, readout: Readout, position: usize) -> Result<Representation> {
        self.representation_in(readout, 0, position)
    }

    pub fn representation_in(&self, readout: Readout, seq: usize, position: usize) -> Result<Representation> {
        let l = self.layer_index(readout)?;
        if seq >= self.n_seq || position >= self.seq_len {
            return Err(Error::Contract(format!(
                "position ({seq}, {position}) out of range for {}×{} record",
                self.n_seq, self.seq_len
            )));
        }
        let lambda = self.normed[l].row(seq * self.seq_len + position).to_vec();
        Representation::new(lambda, readout, self.model_id.clone())
    }
}

/// Per-step loss components.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub final_ce: f64,
    /// Cross-entropy of intermediate readouts that carry weight.
    pub aux_ce: Vec<Option<f64>>,
}

struct LayerVars {
    v: [Var; 14],
}

impl LayerVars {
    fn ln1(&self) -> (Var, Var) {
        (self.v[0], self.v[1])
    }
    fn qkv(&self) -> (Var, Var) {
        (self.v[2], self.v[3])
    }
    fn gate(&self) -> (Var, Var) {
        (self.v[4], self.v[5])
    }
    fn out(&self) -> (Var, Var) {
        (self.v[6], self.v[7])
    }
    fn ln2(&self) -> (Var, Var) {
        (self.v[8], self.v[9])
    }
    fn fc(&self) -> (Var, Var) {
        (self.v[10], self.v[11])
    }
    fn proj(&self) -> (Var, Var) {
        (self.v[12], self.v[13])
    }
}

struct Graph {
    params: Vec<Var>,
    wte: Var,
    head: (Var, Var),
    token_stream: Option<Var>,
    contextual: Vec<Var>,
    combined: Vec<Var>,
}

fn affine(tape: &mut GradTape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn attention(
    tape: &mut GradTape,
    h: Var,
    lv: &LayerVars,
    n_seq: usize,
    n_heads: usize,
    gated: bool,
) -> Result<Var> {
    let d = tape.value(h).cols();
    let qkv = affine(tape, h, lv.qkv())?;
    let q = tape.slice_cols(qkv, 0, d)?;
    let k = tape.slice_cols(qkv, d, d)?;
    let v = tape.slice_cols(qkv, 2 * d, d)?;
    let mut heads = tape.causal_attention(q, k, v, n_seq, n_heads)?;
    if gated {
        let pre = affine(tape, h, lv.gate())?;
        let g = tape.sigmoid(pre);
        heads = tape.mul(heads, g)?;
    }
    affine(tape, heads, lv.out())
}

fn feed_forward(tape: &mut GradTape, h: Var, lv: &LayerVars) -> Result<Var> {
    let a = affine(tape, h, lv.fc())?;
    let a = tape.gelu(a);
    affine(tape, a, lv.proj())
}

impl ModelState {
    fn check_tokens(&self, seqs: &[Vec<usize>]) -> Result<(usize, usize)> {
        let cfg = self.config();
        let t = seqs.first().map_or(0, Vec::len);
        if t == 0 {
            return Err(Error::Contract("forward needs at least one token".into()));
        }
        if seqs.iter().any(|s| s.len() != t) {
            return Err(Error::Contract("sequences in one pass must share a length".into()));
        }
        if t > cfg.context_length {
            return Err(Error::Validation(format!(
                "sequence length {t} exceeds context length {}",
                cfg.context_length
            )));
        }
        if let Some(&bad) = seqs.iter().flatten().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} out of range for vocabulary {}",
                cfg.vocab_size
            )));
        }
        Ok((seqs.len(), t))
    }

    fn build(&self, tape: &mut GradTape, seqs: &[Vec<usize>], trainable: bool) -> Result<Graph> {
        let cfg = self.config();
        let (n_seq, t) = self.check_tokens(seqs)?;
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        let per_layer = 14;
        let wte = params[0];
        let wpe = params[1];
        let layer_vars: Vec<LayerVars> = (0..cfg.n_layers)
            .map(|l| {
                let mut v = [wte; 14];
                v.copy_from_slice(&params[2 + l * per_layer..2 + (l + 1) * per_layer]);
                LayerVars { v }
            })
            .collect();
        let n = params.len();
        let head = (params[n - 2], params[n - 1]);

        let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..n_seq).flat_map(|_| 0..t).collect();
        let tok = tape.gather_rows(wte, &flat)?;
        let pos = tape.gather_rows(wpe, &positions)?;

        let mut graph = Graph {
            params,
            wte,
            head,
            token_stream: None,
            contextual: Vec::new(),
            combined: Vec::new(),
        };
        match cfg.stream_mode {
            StreamMode::Single => {
                let mut x = tape.add(tok, pos)?;
                for lv in &layer_vars {
                    let delta = self.block(tape, x, lv, n_seq)?;
                    x = tape.add(x, delta)?;
                    graph.combined.push(x);
                }
            }
            StreamMode::Cascade => {
                graph.token_stream = Some(tok);
                let base = tape.add(tok, pos)?;
                let mut x_e: Option<Var> = None;
                for lv in &layer_vars {
                    let input = match x_e {
                        None => base,
                        Some(e) => tape.add(base, e)?,
                    };
                    let delta = self.block(tape, input, lv, n_seq)?;
                    let e = match x_e {
                        None => delta,
                        Some(e) => tape.add(e, delta)?,
                    };
                    x_e = Some(e);
                    graph.contextual.push(e);
                    let x = tape.add(tok, e)?;
                    graph.combined.push(x);
                }
            }
        }
        Ok(graph)
    }

    /// Parallel residual update `Attn(LN₁ x) + FFN(LN₂ x)`.
    fn block(&self, tape: &mut GradTape, x: Var, lv: &LayerVars, n_seq: usize) -> Result<Var> {
        let (g1, b1) = lv.ln1();
        let h1 = tape.layer_norm(x, g1, b1)?;
        let a = attention(tape, h1, lv, n_seq, self.config().n_heads, true)?;
        let (g2, b2) = lv.ln2();
        let h2 = tape.layer_norm(x, g2, b2)?;
        let f = feed_forward(tape, h2, lv)?;
        tape.add(a, f)
    }

    fn readout(tape: &mut GradTape, graph: &Graph, layer: usize) -> Result<(Var, Var)> {
        let normed = tape.layer_norm(graph.combined[layer], graph.head.0, graph.head.1)?;
        let logits = tape.matmul_nt(normed, graph.wte)?;
        Ok((normed, logits))
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardRecord> {
        self.forward_batch(&[tokens.to_vec()])
    }

    pub fn forward_batch(&self, seqs: &[Vec<usize>]) -> Result<ForwardRecord> {
        let mut tape = GradTape::new();
        let graph = self.build(&mut tape, seqs, false)?;
        let mut normed = Vec::new();
        let mut logits = Vec::new();
        for l in 0..graph.combined.len() {
            let (n, z) = Self::readout(&mut tape, &graph, l)?;
            normed.push(tape.value(n).clone());
            logits.push(tape.value(z).clone());
        }
        let grab = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>();
        Ok(ForwardRecord {
            model_id: self.model_id().to_string(),
            n_seq: seqs.len(),
            seq_len: seqs[0].len(),
            token_stream: graph.token_stream.map(|v| tape.value(v).clone()),
            contextual: grab(&graph.contextual),
            combined: grab(&graph.combined),
            normed,
            logits,
        })
    }

    /// `λ` vectors at the last position of each sequence.
    pub fn last_position_lambdas(&self, seqs: &[Vec<usize>], readout: Readout) -> Result<Vec<Representation>> {
        let rec = self.forward_batch(seqs)?;
        (0..rec.n_seq)
            .map(|s| rec.representation_in(readout, s, rec.seq_len - 1))
            .collect()
    }

    fn loss_graph(&self, tape: &mut GradTape, batch: &Batch, trainable: bool) -> Result<(Graph, Var, LossBreakdown)> {
        if batch.n_seq() == 0 || batch.seq_len() == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let graph = self.build(tape, &batch.tokens, trainable)?;
        let targets: Vec<usize> = batch.targets.iter().flatten().copied().collect();
        let last = graph.combined.len() - 1;
        let (_, z) = Self::readout(tape, &graph, last)?;
        let final_ce = tape.cross_entropy(z, &targets)?;
        let mut terms = vec![(final_ce, 1.0)];
        let mut aux_ce = Vec::new();
        for (l, c) in self.config().aux_coefficients().into_iter().enumerate() {
            if c == 0.0 {
                aux_ce.push(None);
                continue;
            }
            let (_, z) = Self::readout(tape, &graph, l)?;
            let ce = tape.cross_entropy(z, &targets)?;
            aux_ce.push(Some(tape.scalar(ce)));
            terms.push((ce, c));
        }
        let total = tape.combine(&terms)?;
        let breakdown = LossBreakdown {
            total: tape.scalar(total),
            final_ce: tape.scalar(final_ce),
            aux_ce,
        };
        Ok((graph, total, breakdown))
    }

    /// `CE(z^(L-1)) + Σ_ℓ c_ℓ CE(z^(ℓ))` with the configured coefficients.
    pub fn composite_loss(&self, batch: &Batch) -> Result<f64> {
        Ok(self.evaluate(batch)?.total)
    }

    pub fn evaluate(&self, batch: &Batch) -> Result<LossBreakdown> {
        let mut tape = GradTape::new();
        Ok(self.loss_graph(&mut tape, batch, false)?.2)
    }

    /// Loss and its gradient for every parameter, in [`ModelState::params`] order.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let mut tape = GradTape::new();
        let (graph, total, breakdown) = self.loss_graph(&mut tape, batch, true)?;
        let mut grads = tape.backward(total)?;
        let g = graph.params.iter().map(|&p| grads.take(p)).collect();
        Ok((breakdown, g))
    }

    /// Multi-head attention sublayer of block `layer` applied to `x`
    /// (before the residual add), with or without the output gate.
    pub fn attention_sublayer(&self, layer: usize, x: &Tensor, n_seq: usize, gated: bool) -> Result<Tensor> {
        let lp = self.layers.get(layer).ok_or_else(|| {
            Error::Contract(format!("layer {layer} out of range"))
        })?;
        let mut tape = GradTape::new();
        let xv = tape.constant(x.clone());
        let mut v = [xv; 14];
        for (slot, t) in v.iter_mut().zip([
            &lp.ln1_g, &lp.ln1_b, &lp.w_qkv, &lp.b_qkv, &lp.w_gate, &lp.b_gate, &lp.w_out,
            &lp.b_out, &lp.ln2_g, &lp.ln2_b, &lp.w_fc, &lp.b_fc, &lp.w_proj, &lp.b_proj,
        ]) {
            *slot = tape.constant(t.clone());
        }
        let lv = LayerVars { v };
        let (g1, b1) = lv.ln1();
        let h = tape.layer_norm(xv, g1, b1)?;
        let out = attention(&mut tape, h, &lv, n_seq, self.config().n_heads, gated)?;
        Ok(tape.value(out).clone())
    }
}
