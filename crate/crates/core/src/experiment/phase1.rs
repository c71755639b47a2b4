use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{
    aggregate_hessian, hessian, mean_of_summaries, summarize, HessianEstimate, MeanSummary, Readout, SpectrumSummary,
};
use crate::model::{ModelState, Variant};
use crate::training::{Corpus, HeldOut};

use super::{map_states, readouts, FactorialSpec};

/// Seed offset separating measurement sampling from training sampling.
const MEASUREMENT_SEED: u64 = 0x5048_4153_4531;

/// Per-context metrics kept so every aggregate can be traced back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextMetrics {
    pub batch: usize,
    pub seq: usize,
    pub effective_rank: f64,
    pub condition_number: Option<f64>,
    pub trace: f64,
}

/// One (variant, readout) cell of the Phase-1 tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase1Cell {
    pub variant: Variant,
    pub layer: Readout,
    pub top_k: usize,
    /// Spectrum of the context-averaged Hessian; `None` if the cell failed.
    pub summary: Option<SpectrumSummary>,
    /// Metrics averaged over contexts instead.
    pub per_context_mean: Option<MeanSummary>,
    pub contexts: Vec<ContextMetrics>,
    pub failure: Option<String>,
}

/// Hessian spectra at the last position of held-out measurement contexts,
/// for every block readout and the output head.
pub fn run_phase1(spec: &FactorialSpec, corpus: &Corpus, states: &[(Variant, ModelState)]) -> Result<Vec<Phase1Cell>> {
    let per_variant = map_states(states, spec.threads, |v, state| measure_variant(spec, corpus, v, state))?;
    Ok(per_variant.into_iter().flatten().collect())
}

fn measure_variant(spec: &FactorialSpec, corpus: &Corpus, v: Variant, state: &ModelState) -> Result<Vec<Phase1Cell>> {
    let cfg = state.config();
    let ctx = spec.phase1.context_length.unwrap_or(cfg.context_length);
    let top_k = spec.phase1.top_k.min(cfg.vocab_size);
    let batches = corpus.held_out_batches(
        HeldOut::Measurement,
        spec.phase1.n_batches,
        spec.phase1.batch_size,
        ctx,
        spec.plan.seed ^ MEASUREMENT_SEED,
    )?;
    let family = state.family();
    let layers = readouts(cfg.n_layers);
    let mut estimates: Vec<Vec<(usize, usize, HessianEstimate)>> = vec![Vec::new(); layers.len()];
    for (b, batch) in batches.iter().enumerate() {
        let rec = state.forward_batch(&batch.tokens)?;
        for (slot, &layer) in layers.iter().enumerate() {
            for s in 0..rec.n_seq {
                let repr = rec.representation_in(layer, s, rec.seq_len - 1)?;
                estimates[slot].push((b, s, hessian(&family, &repr, top_k)?));
            }
        }
    }
    Ok(layers
        .iter()
        .zip(estimates)
        .map(|(&layer, est)| summarize_cell(v, layer, top_k, est))
        .collect())
}

fn summarize_cell(v: Variant, layer: Readout, top_k: usize, est: Vec<(usize, usize, HessianEstimate)>) -> Phase1Cell {
    let mut cell = Phase1Cell {
        variant: v,
        layer,
        top_k,
        summary: None,
        per_context_mean: None,
        contexts: Vec::with_capacity(est.len()),
        failure: None,
    };
    let mut summaries = Vec::with_capacity(est.len());
    for (batch, seq, h) in &est {
        match summarize(h) {
            Ok(s) => {
                cell.contexts.push(ContextMetrics {
                    batch: *batch,
                    seq: *seq,
                    effective_rank: s.effective_rank,
                    condition_number: s.condition_number,
                    trace: s.trace,
                });
                summaries.push(s);
            }
            Err(e) => {
                cell.failure = Some(format!("context ({batch}, {seq}): {e}"));
                return cell;
            }
        }
    }
    cell.per_context_mean = mean_of_summaries(&summaries);
    let matrices: Vec<HessianEstimate> = est.into_iter().map(|(_, _, h)| h).collect();
    match aggregate_hessian(&matrices).and_then(|agg| summarize(&agg)) {
        Ok(s) => cell.summary = Some(s),
        Err(e) => cell.failure = Some(format!("aggregate: {e}")),
    }
    cell
}
