//! Matched toy transformers for the 2×2 factorial: single-stream vs. cascade
//! (frozen token stream) crossed with per-layer supervision.
//!
//! Every variant built from one base config has the same parameter layout;
//! the factors only change how the residual stream is assembled and which
//! readouts enter the loss.

mod checkpoint;
mod forward;
mod state;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{
    from_bytes, load_checkpoint, save_checkpoint, to_bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use forward::{Batch, ForwardRecord, LossBreakdown};
pub use state::{LayerParams, ModelState};

pub const DEFAULT_AUX_LAMBDA: f64 = 0.1;
/// Gate pre-activation bias at init; sigmoid(4) ≈ 0.982.
pub const GATE_BIAS_INIT: f64 = 4.0;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    Single,
    Cascade,
}

/// How per-layer auxiliary losses are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxSchedule {
    /// `aux_lambda · (ℓ+1)/L` on layers `0..L-1`.
    Proportional,
    /// Weights rising linearly from 0.1 on layer 0 to 0.8 on layer `L-2`,
    /// used as-is (no `aux_lambda`).
    Ramp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub stream_mode: StreamMode,
    pub aux_loss: bool,
    pub aux_lambda: f64,
    pub aux_schedule: AuxSchedule,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// The desk-scale toy preset.
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            vocab_size: 256,
            context_length: 128,
            stream_mode: StreamMode::Single,
            aux_loss: false,
            aux_lambda: DEFAULT_AUX_LAMBDA,
            aux_schedule: AuxSchedule::Proportional,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_layers < 2 {
            bad.push(format!("n_layers = {} (need >= 2)", self.n_layers));
        }
        if self.vocab_size < 2 {
            bad.push(format!("vocab_size = {} (need >= 2)", self.vocab_size));
        }
        if self.n_heads == 0 {
            bad.push("n_heads = 0 (need >= 1)".to_string());
        } else if self.d_model % self.n_heads != 0 {
            bad.push(format!(
                "d_model = {} is not divisible by n_heads = {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model < 2 {
            bad.push(format!("d_model = {} (need >= 2)", self.d_model));
        }
        if self.context_length == 0 {
            bad.push("context_length = 0 (need >= 1)".to_string());
        }
        if !self.aux_lambda.is_finite() || self.aux_lambda < 0.0 {
            bad.push(format!("aux_lambda = {} (need finite, >= 0)", self.aux_lambda));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid model config: {}", bad.join("; "))))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    /// Linear decay weights `w_ℓ = (ℓ+1)/L` for layers `0..L-1`.
    pub fn layer_weights(&self) -> Vec<f64> {
        let l = self.n_layers as f64;
        (0..self.n_layers.saturating_sub(1))
            .map(|i| (i as f64 + 1.0) / l)
            .collect()
    }

    /// Coefficient on each intermediate-layer cross-entropy; all zero
    /// without the auxiliary loss.
    pub fn aux_coefficients(&self) -> Vec<f64> {
        let n = self.n_layers.saturating_sub(1);
        if !self.aux_loss {
            return vec![0.0; n];
        }
        match self.aux_schedule {
            AuxSchedule::Proportional => self
                .layer_weights()
                .into_iter()
                .map(|w| self.aux_lambda * w)
                .collect(),
            AuxSchedule::Ramp => (0..n)
                .map(|i| {
                    if n <= 1 {
                        0.1
                    } else {
                        0.1 + 0.7 * i as f64 / (n - 1) as f64
                    }
                })
                .collect(),
        }
    }
}

/// One cell of the 2×2 design.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    CascadeAux,
    CascadeControl,
    SingleAux,
    SingleControl,
}

impl Variant {
    /// Column order of every report table.
    pub const ALL: [Variant; 4] = [
        Variant::CascadeAux,
        Variant::CascadeControl,
        Variant::SingleAux,
        Variant::SingleControl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CascadeAux => "cascade_aux",
            Variant::CascadeControl => "cascade_control",
            Variant::SingleAux => "single_aux",
            Variant::SingleControl => "single_control",
        }
    }

    pub fn stream_mode(self) -> StreamMode {
        match self {
            Variant::CascadeAux | Variant::CascadeControl => StreamMode::Cascade,
            _ => StreamMode::Single,
        }
    }

    pub fn aux_loss(self) -> bool {
        matches!(self, Variant::CascadeAux | Variant::SingleAux)
    }

    pub fn configure(self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            stream_mode: self.stream_mode(),
            aux_loss: self.aux_loss(),
            ..base.clone()
        }
    }

    pub fn names() -> String {
        Variant::ALL.map(Variant::name).join(", ")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown variant '{s}'; valid names: {}",
                    Variant::names()
                ))
            })
    }
}

#[cfg(test)]
mod tests;
