//! Byte-level corpus handling, batching and the Adam training loop.

mod corpus;
pub mod synthetic;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Batch, ModelState};
use crate::numerics::Tensor;

pub use corpus::{detokenize, tokenize, Corpus, HeldOut, BYTE_VOCAB};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;
pub const GRAD_CLIP: f64 = 1.0;
/// Cosine decay floor as a fraction of peak learning rate.
pub const MIN_LR_RATIO: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Validation loss is measured every this many steps (and at the end).
    pub checkpoint_every: usize,
    /// Held-out batches per validation measurement.
    pub val_batches: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            steps: 2000,
            batch_size: 16,
            learning_rate: 3e-4,
            warmup_steps: 100,
            seed: 0,
            checkpoint_every: 200,
            val_batches: 4,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push("batch_size = 0".to_string());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            bad.push(format!("learning_rate = {} (need > 0)", self.learning_rate));
        }
        if self.checkpoint_every == 0 {
            bad.push("checkpoint_every = 0".to_string());
        }
        if self.val_batches == 0 {
            bad.push("val_batches = 0".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid train plan: {}", bad.join("; "))))
        }
    }

    /// Linear warmup to the peak, then cosine decay to `MIN_LR_RATIO` of it.
    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.learning_rate;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        peak * (MIN_LR_RATIO + (1.0 - MIN_LR_RATIO) * cosine)
    }
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl Adam {
    pub fn new(state: &ModelState) -> Self {
        let zeros: Vec<Vec<f64>> = state.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected update. A zero gradient leaves parameters untouched.
    pub fn step(&mut self, state: &mut ModelState, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, p) in state.params_mut().into_iter().enumerate() {
            let g = grads[i].data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Rescales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub curve: Vec<LossRow>,
    /// SHA-256 over every training batch, in order.
    pub data_digest: String,
}

impl TrainOutcome {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.curve.iter().rev().find_map(|r| r.val_loss)
    }
}

/// Mean final-head cross-entropy over `batches`.
pub fn validation_loss(state: &ModelState, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        total += state.evaluate(b)?.final_ce;
    }
    Ok(total / batches.len() as f64)
}

/// Trains `state` in place on `corpus` under `plan`. `progress` sees every
/// row as it is recorded.
pub fn train(
    mut state: ModelState,
    corpus: &Corpus,
    plan: &TrainPlan,
    mut progress: impl FnMut(&LossRow),
) -> Result<TrainOutcome> {
    plan.validate()?;
    let ctx = state.config().context_length;
    let mut curve = Vec::with_capacity(plan.steps);
    let mut digest = Sha256::new();
    if plan.steps == 0 {
        return Ok(TrainOutcome {
            state,
            curve,
            data_digest: hex::encode(&digest.finalize()),
        });
    }
    let val = corpus.held_out_batches(HeldOut::All, plan.val_batches, plan.batch_size, ctx, plan.seed)?;
    let mut adam = Adam::new(&state);
    for step in 0..plan.steps {
        let batch = corpus.next_batch(plan, ctx, step)?;
        digest.update(batch.fingerprint().as_bytes());
        let (loss, mut grads) = state.loss_and_grads(&batch)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                param_norm: state.param_norm(),
            });
        }
        clip_grad_norm(&mut grads, GRAD_CLIP);
        adam.step(&mut state, &grads, plan.lr_at(step));
        if !state.all_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                param_norm: state.param_norm(),
            });
        }
        let last = step + 1 == plan.steps;
        let val_loss = if (step + 1) % plan.checkpoint_every == 0 || last {
            Some(validation_loss(&state, &val)?)
        } else {
            None
        };
        let row = LossRow {
            step,
            train_loss: loss.total,
            val_loss,
        };
        progress(&row);
        curve.push(row);
    }
    Ok(TrainOutcome {
        state,
        curve,
        data_digest: hex::encode(&digest.finalize()),
    })
}

/// `step,train_loss,val_loss` with an empty field where validation was
/// not measured.
pub fn loss_curve_csv(curve: &[LossRow]) -> String {
    let mut s = String::from("step,train_loss,val_loss\n");
    for r in curve {
        let v = r.val_loss.map(|v| format!("{v:.10}")).unwrap_or_default();
        writeln!(s, "{},{:.10},{}", r.step, r.train_loss, v).unwrap();
    }
    s
}

/// Exponential moving average of the train loss, for progress checks.
pub fn smoothed(curve: &[LossRow], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(curve.len());
    let mut acc = None;
    for r in curve {
        let a = match acc {
            None => r.train_loss,
            Some(prev) => alpha * r.train_loss + (1.0 - alpha) * prev,
        };
        acc = Some(a);
        out.push(a);
    }
    out
}

#[cfg(test)]
mod tests;
