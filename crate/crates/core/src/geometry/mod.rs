//! The softmax output head viewed as an exponential family.
//!
//! With token embeddings `γ_y` (rows of the tied embedding matrix) and a
//! representation `λ`, the head defines `p(y|λ) = exp(λᵀγ_y − A(λ))` where
//! `A(λ) = log Σ_y exp(λᵀγ_y)`. Its gradient `η = ∇A = E[γ|λ]` is the dual
//! coordinate and its Hessian `H = ∇²A = Cov[γ|λ]` is the metric tensor.

mod spectrum;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gemm, log_sum_exp, pairwise_sum, stable_softmax, Tensor};

pub use spectrum::{
    condition_number, effective_rank, mean_of_summaries, summarize, ConditionNumber, EffectiveRank,
    MeanSummary,
    SpectrumSummary, RANK_REL_TOL,
};

/// Default top-K cap for the Hessian sum.
pub const DEFAULT_TOP_K: usize = 20_000;

/// `V×d` tied token embedding / unembedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix(Tensor);

impl EmbeddingMatrix {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "embedding matrix must be V×d, got {:?}",
                t.shape()
            )));
        }
        if t.shape()[0] < 2 {
            return Err(Error::Validation(format!(
                "embedding needs at least two tokens, got {}",
                t.shape()[0]
            )));
        }
        if !t.all_finite() {
            return Err(Error::Numeric("embedding has non-finite entries".into()));
        }
        Ok(EmbeddingMatrix(t))
    }

    pub fn vocab(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, y: usize) -> &[f64] {
        self.0.row(y)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Which readout of a model a representation comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// After block `ℓ`, read through the shared head LayerNorm.
    Layer(usize),
    /// The representation the output head consumes.
    Final,
}

impl fmt::Display for Readout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Readout::Layer(l) => write!(f, "{l}"),
            Readout::Final => f.write_str("final"),
        }
    }
}

/// A representation `λ` in embedding coordinates, tagged with the readout and model it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation {
    pub lambda: Vec<f64>,
    pub layer: Readout,
    pub model_id: String,
}

impl Representation {
    pub fn new(lambda: Vec<f64>, layer: Readout, model_id: impl Into<String>) -> Result<Self> {
        if lambda.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("representation has non-finite entries".into()));
        }
        Ok(Representation {
            lambda,
            layer,
            model_id: model_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }
}

/// The exponential family generated by an embedding matrix.
#[derive(Clone, Debug)]
pub struct SoftmaxFamily {
    embedding: EmbeddingMatrix,
}

impl SoftmaxFamily {
    pub fn new(embedding: EmbeddingMatrix) -> Self {
        SoftmaxFamily { embedding }
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        Ok(SoftmaxFamily::new(EmbeddingMatrix::new(t)?))
    }

    pub fn embedding(&self) -> &EmbeddingMatrix {
        &self.embedding
    }

    pub fn vocab(&self) -> usize {
        self.embedding.vocab()
    }

    pub fn dim(&self) -> usize {
        self.embedding.dim()
    }

    pub fn gamma(&self, y: usize) -> &[f64] {
        self.embedding.row(y)
    }

    fn check_dim(&self, lambda: &[f64]) -> Result<()> {
        if lambda.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "representation has dimension {} but the family has d = {}",
                lambda.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Token logits `γ λ`, one gemm row so that they agree bit for bit with
    /// the model's batched head.
    pub fn logits(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(lambda)?;
        let (v, d) = (self.vocab(), self.dim());
        let mut out = vec![0.0; v];
        gemm(1, d, v, lambda, false, self.embedding.0.data(), true, &mut out, false);
        Ok(out)
    }

    pub fn probs(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        stable_softmax(&self.logits(lambda)?)
    }
}

/// `A(λ) = log Σ_y exp(λᵀγ_y)`.
pub fn log_normalizer(family: &SoftmaxFamily, lambda: &[f64]) -> Result<f64> {
    Ok(log_sum_exp(&family.logits(lambda)?))
}

/// `η = Σ_y p(y|λ) γ_y`.
pub fn dual_coords(family: &SoftmaxFamily, lambda: &[f64]) -> Result<Vec<f64>> {
    let p = family.probs(lambda)?;
    Ok(weighted_mean(family, &p, 0..family.vocab()))
}

fn weighted_mean(family: &SoftmaxFamily, p: &[f64], ids: impl IntoIterator<Item = usize>) -> Vec<f64> {
    let mut eta = vec![0.0; family.dim()];
    for y in ids {
        let py = p[y];
        for (e, g) in eta.iter_mut().zip(family.gamma(y)) {
            *e += py * g;
        }
    }
    eta
}

/// Indices of the `k` most probable tokens, ties to the lower index,
/// returned in ascending index order.
pub fn top_k_indices(p: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    if k < p.len() {
        order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        order.truncate(k);
        order.sort_unstable();
    }
    order
}

/// Covariance of `γ` under `p(·|λ)` restricted to the `top_k` most probable
/// tokens and renormalized over them.
pub fn hessian_matrix(family: &SoftmaxFamily, lambda: &[f64], top_k: usize) -> Result<Tensor> {
    if top_k < 2 {
        return Err(Error::Contract(format!("top_k must be at least 2, got {top_k}")));
    }
    let p = family.probs(lambda)?;
    Ok(covariance_of(family, &p, top_k))
}

pub(crate) fn covariance_of(family: &SoftmaxFamily, p: &[f64], top_k: usize) -> Tensor {
    let d = family.dim();
    let ids = top_k_indices(p, top_k.min(p.len()));
    let mass: f64 = ids.iter().map(|&y| p[y]).sum();
    let pt: Vec<f64> = ids.iter().map(|&y| p[y] / mass).collect();

    let mut eta = vec![0.0; d];
    for (&y, &w) in ids.iter().zip(&pt) {
        for (e, g) in eta.iter_mut().zip(family.gamma(y)) {
            *e += w * g;
        }
    }
    // H = Wᵀ W with rows W_y = sqrt(p̃_y)(γ_y − η̃); symmetric by construction.
    let mut w = Vec::with_capacity(ids.len() * d);
    for (&y, &py) in ids.iter().zip(&pt) {
        let s = py.sqrt();
        w.extend(family.gamma(y).iter().zip(&eta).map(|(g, e)| s * (g - e)));
    }
    let mut h = vec![0.0; d * d];
    gemm(d, ids.len(), d, &w, true, &w, false, &mut h, false);
    Tensor::from_parts(vec![d, d], h)
}

/// Analytic Hessian estimate for one context.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianEstimate {
    pub matrix: Tensor,
    pub n_contexts: usize,
    pub top_k: usize,
    pub layer: Readout,
    pub model_id: String,
}

impl HessianEstimate {
    pub fn dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }
}

pub fn hessian(family: &SoftmaxFamily, repr: &Representation, top_k: usize) -> Result<HessianEstimate> {
    if top_k > family.vocab() {
        return Err(Error::Contract(format!(
            "top_k = {top_k} exceeds the vocabulary size {}",
            family.vocab()
        )));
    }
    Ok(HessianEstimate {
        matrix: hessian_matrix(family, &repr.lambda, top_k)?,
        n_contexts: 1,
        top_k,
        layer: repr.layer,
        model_id: repr.model_id.clone(),
    })
}

/// Context-weighted entrywise mean of Hessian estimates.
///
/// Each entry is summed pairwise in input order, so the result does not
/// depend on how the per-context matrices were produced.
pub fn aggregate_hessian(estimates: &[HessianEstimate]) -> Result<HessianEstimate> {
    let first = estimates
        .first()
        .ok_or_else(|| Error::Contract("aggregate_hessian of an empty list".into()))?;
    for e in estimates {
        if e.layer != first.layer || e.model_id != first.model_id {
            return Err(Error::Validation(format!(
                "cannot aggregate ({}, layer {}) with ({}, layer {})",
                first.model_id, first.layer, e.model_id, e.layer
            )));
        }
        if e.matrix.shape() != first.matrix.shape() {
            return Err(Error::Validation(format!(
                "mixed Hessian shapes {:?} and {:?}",
                first.matrix.shape(),
                e.matrix.shape()
            )));
        }
        if e.top_k != first.top_k {
            return Err(Error::Validation(format!(
                "mixed top_k {} and {}",
                first.top_k, e.top_k
            )));
        }
    }
    let total: usize = estimates.iter().map(|e| e.n_contexts).sum();
    let n = first.matrix.len();
    let mut column = vec![0.0; estimates.len()];
    let mut out = vec![0.0; n];
    for (j, o) in out.iter_mut().enumerate() {
        for (c, e) in column.iter_mut().zip(estimates) {
            *c = e.matrix.data()[j] * e.n_contexts as f64;
        }
        *o = pairwise_sum(&column) / total as f64;
    }
    Ok(HessianEstimate {
        matrix: Tensor::from_parts(first.matrix.shape().to_vec(), out),
        n_contexts: total,
        top_k: first.top_k,
        layer: first.layer,
        model_id: first.model_id.clone(),
    })
}

#[cfg(test)]
mod tests;
