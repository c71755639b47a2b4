use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::eigh;

use super::{HessianEstimate, Readout};

/// Eigenvalues below `RANK_REL_TOL · σ_max` are not retained.
pub const RANK_REL_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveRank {
    pub value: f64,
    /// The spectrum had no positive mass; `value` is 0.
    pub trace_collapse: bool,
}

/// `exp(−Σ σ̂ᵢ log σ̂ᵢ)` over the normalized, non-negative spectrum.
pub fn effective_rank(eigenvalues: &[f64]) -> EffectiveRank {
    let clamped: Vec<f64> = eigenvalues.iter().map(|&x| x.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total <= 0.0 {
        return EffectiveRank {
            value: 0.0,
            trace_collapse: true,
        };
    }
    let entropy: f64 = clamped
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| {
            let s = x / total;
            -s * s.ln()
        })
        .sum();
    EffectiveRank {
        value: entropy.exp(),
        trace_collapse: false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ConditionNumber {
    Defined {
        kappa: f64,
        retained_rank: usize,
        rank_deficient: bool,
    },
    /// `σ_max ≤ 0`.
    Undefined,
}

impl ConditionNumber {
    pub fn kappa(&self) -> Option<f64> {
        match self {
            ConditionNumber::Defined { kappa, .. } => Some(*kappa),
            ConditionNumber::Undefined => None,
        }
    }
}

/// `σ_max / σ_min` over eigenvalues `≥ 1e-12 · σ_max`.
pub fn condition_number(eigenvalues: &[f64]) -> ConditionNumber {
    let max = eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return ConditionNumber::Undefined;
    }
    let floor = RANK_REL_TOL * max;
    let retained: Vec<f64> = eigenvalues.iter().copied().filter(|&x| x >= floor).collect();
    let min = retained.iter().copied().fold(f64::INFINITY, f64::min);
    ConditionNumber::Defined {
        kappa: max / min,
        retained_rank: retained.len(),
        rank_deficient: retained.len() < eigenvalues.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub layer: Readout,
    pub model_id: String,
    pub n_contexts: usize,
    /// Descending, negatives clamped to zero.
    pub eigenvalues: Vec<f64>,
    pub effective_rank: f64,
    pub trace_collapse: bool,
    /// `None` when undefined.
    pub condition_number: Option<f64>,
    pub rank_deficient: bool,
    pub retained_rank: usize,
    pub trace: f64,
}

pub fn summarize(h: &HessianEstimate) -> Result<SpectrumSummary> {
    let eig = eigh(&h.matrix)?;
    let eigenvalues: Vec<f64> = eig.eigenvalues.iter().map(|&x| x.max(0.0)).collect();
    let er = effective_rank(&eigenvalues);
    let (kappa, retained_rank, rank_deficient) = match condition_number(&eigenvalues) {
        ConditionNumber::Defined {
            kappa,
            retained_rank,
            rank_deficient,
        } => (Some(kappa), retained_rank, rank_deficient),
        ConditionNumber::Undefined => (None, 0, true),
    };
    Ok(SpectrumSummary {
        layer: h.layer,
        model_id: h.model_id.clone(),
        n_contexts: h.n_contexts,
        eigenvalues,
        effective_rank: er.value,
        trace_collapse: er.trace_collapse,
        condition_number: kappa,
        rank_deficient,
        retained_rank,
        trace: h.trace(),
    })
}

/// Mean of per-context metrics: the alternative reading of a multi-context
/// estimate, where metrics rather than matrices are averaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSummary {
    pub effective_rank: f64,
    /// Mean over contexts with a defined condition number.
    pub condition_number: Option<f64>,
    pub trace: f64,
    pub n_contexts: usize,
}

pub fn mean_of_summaries(summaries: &[SpectrumSummary]) -> Option<MeanSummary> {
    if summaries.is_empty() {
        return None;
    }
    let n = summaries.len() as f64;
    let kappas: Vec<f64> = summaries.iter().filter_map(|s| s.condition_number).collect();
    Some(MeanSummary {
        effective_rank: summaries.iter().map(|s| s.effective_rank).sum::<f64>() / n,
        condition_number: (!kappas.is_empty()).then(|| kappas.iter().sum::<f64>() / kappas.len() as f64),
        trace: summaries.iter().map(|s| s.trace).sum::<f64>() / n,
        n_contexts: summaries.len(),
    })
}
