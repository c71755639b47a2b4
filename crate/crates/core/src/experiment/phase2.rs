use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Readout;
use crate::model::{ModelState, Variant};
use crate::steering::{
    build_concept, cosine_from_hessian, kl_advantage_from_stops, run_steering, verdict, write_trace_csv, ConceptDirection,
    ConceptMode, ConceptSpec, DualImage, KlAdvantage, Method, Pole, SteeringOptions, SteeringTrace, TraceRow, Verdict,
    TRACE_CSV_HEADER,
};
use crate::geometry::hessian_matrix;
use crate::training::{Corpus, HeldOut};

use super::{map_states, readouts, stats, FactorialSpec};

pub const CONCEPT_NAMES: [&str; 2] = ["capitalization", "vowel"];

const PROMPT_SEED: u64 = 0x434f_4e43_4550;
const START_SEED: u64 = 0x5354_4152_5453;
/// Smallest noise floor, used when the ε = 0 controls agree exactly.
const MIN_NOISE_FLOOR: f64 = 1e-9;

fn letters(range: std::ops::RangeInclusive<u8>, keep: impl Fn(u8) -> bool) -> Vec<usize> {
    range.filter(|&b| keep(b)).map(usize::from).collect()
}

/// The concept's token poles: pole a is the steering target.
fn poles(name: &str) -> Result<(Vec<usize>, Vec<usize>)> {
    let vowel = |b: u8| b"aeiou".contains(&b);
    match name {
        "capitalization" => Ok((letters(b'A'..=b'Z', |_| true), letters(b'a'..=b'z', |_| true))),
        "vowel" => Ok((letters(b'a'..=b'z', vowel), letters(b'a'..=b'z', |b| !vowel(b)))),
        other => Err(Error::Config(format!(
            "unknown concept '{other}' (valid: {})",
            CONCEPT_NAMES.join(", ")
        ))),
    }
}

/// Activation-difference concept: held-out steering-pool windows whose
/// next byte falls in each pole, `per_pole` of each, drawn with a seed.
pub fn concept_spec(name: &str, corpus: &Corpus, len: usize, per_pole: usize, seed: u64) -> Result<ConceptSpec> {
    let (pole_a, pole_b) = poles(name)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROMPT_SEED);
    let mut prompts = Vec::new();
    for (pole, ids) in [(Pole::A, &pole_a), (Pole::B, &pole_b)] {
        let pool = corpus.held_out_windows_where(HeldOut::Steering, len, |t| ids.contains(&t));
        if pool.is_empty() {
            return Err(Error::Config(format!(
                "concept '{name}': no held-out window of length {len} precedes a pole-{pole:?} token"
            )));
        }
        prompts.extend(pool.choose_multiple(&mut rng, per_pole).map(|p| (p.clone(), pole)));
    }
    Ok(ConceptSpec {
        name: name.to_string(),
        pole_a,
        pole_b,
        prompts,
        mode: ConceptMode::ActivationDiff,
    })
}

/// Stop-step outcome of one Euclidean/dual pair at one step size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunPair {
    pub epsilon: f64,
    pub euclidean_stop: Option<usize>,
    pub dual_stop: Option<usize>,
    pub euclidean_kl: Option<f64>,
    pub dual_kl: Option<f64>,
}

/// Everything measured from one start state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase2Context {
    pub variant: Variant,
    pub layer: Readout,
    pub concept: String,
    pub context_id: usize,
    pub p_target_start: f64,
    pub cosine: f64,
    pub cosine_degenerate: bool,
    pub runs: Vec<RunPair>,
    /// `|KL_euclid − KL_dual|` after one step at ε = 0.
    pub control_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonAdvantage {
    pub epsilon: f64,
    pub advantage: KlAdvantage,
    pub euclidean_failures: usize,
    pub dual_failures: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConsistency {
    /// Defined at every step size with one sign throughout.
    Consistent,
    Inconsistent,
    /// Reference advantage within the noise floor; not judged.
    BelowFloor,
    /// Reference advantage undefined (no successful pair).
    Undefined,
}

/// One (variant, readout, concept) cell of the steering tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase2Cell {
    pub variant: Variant,
    pub layer: Readout,
    pub concept: String,
    pub n_contexts: usize,
    /// Mean cosine diagnostic over start states.
    pub cosine: Option<f64>,
    pub verdict: Option<Verdict>,
    pub n_degenerate: usize,
    pub by_epsilon: Vec<EpsilonAdvantage>,
    /// The smallest step size; its advantage is the cell's headline value.
    pub reference_epsilon: f64,
    pub noise_floor: f64,
    pub sign: SignConsistency,
    pub failure: Option<String>,
}

impl Phase2Cell {
    pub fn kl_advantage(&self) -> Option<f64> {
        self.by_epsilon
            .iter()
            .find(|e| e.epsilon == self.reference_epsilon)
            .and_then(|e| e.advantage.value)
    }

    pub fn failures(&self) -> (usize, usize) {
        self.by_epsilon
            .iter()
            .find(|e| e.epsilon == self.reference_epsilon)
            .map_or((0, 0), |e| (e.euclidean_failures, e.dual_failures))
    }
}

/// A point of the cosine-versus-advantage scatter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub variant: Variant,
    pub layer: Readout,
    pub cosine: Option<f64>,
    pub kl_advantage: Option<f64>,
}

fn sign_consistency(by_eps: &[EpsilonAdvantage], reference: Option<f64>, floor: f64) -> SignConsistency {
    let Some(r) = reference else {
        return SignConsistency::Undefined;
    };
    if r.abs() <= floor {
        return SignConsistency::BelowFloor;
    }
    let agree = by_eps
        .iter()
        .all(|e| e.advantage.value.is_some_and(|a| a != 0.0 && a.signum() == r.signum()));
    if agree {
        SignConsistency::Consistent
    } else {
        SignConsistency::Inconsistent
    }
}

fn steering_options(spec: &FactorialSpec, max_steps: usize) -> SteeringOptions {
    SteeringOptions {
        max_steps,
        dual_mode: spec.phase2.dual_mode,
        ..SteeringOptions::default()
    }
}

fn run_context(
    spec: &FactorialSpec,
    state: &ModelState,
    concept: &ConceptDirection,
    start: &[f64],
    context_id: usize,
    traces: &mut String,
    variant: Variant,
) -> Result<Phase2Context> {
    let family = state.family();
    let h = hessian_matrix(&family, start, family.vocab())?;
    let cos = cosine_from_hessian(&h, &concept.v, DualImage::Hessian)?;
    let opts = steering_options(spec, spec.phase2.max_steps);
    let mut runs = Vec::with_capacity(spec.phase2.step_sizes.len());
    let mut p_start = 0.0;
    let mut eps_sorted = spec.phase2.step_sizes.clone();
    eps_sorted.sort_by(f64::total_cmp);
    for &eps in &eps_sorted {
        let e = run_steering(&family, start, concept, Method::Euclidean, eps, &opts)?;
        let d = run_steering(&family, start, concept, Method::Dual, eps, &opts)?;
        p_start = e.records[0].p_target;
        if context_id == 0 {
            for t in [&e, &d] {
                sample_trace(traces, variant, concept, context_id, t);
            }
        }
        runs.push(RunPair {
            epsilon: eps,
            euclidean_stop: e.stop_step,
            dual_stop: d.stop_step,
            euclidean_kl: e.kl_at_stop(),
            dual_kl: d.kl_at_stop(),
        });
    }
    // Zero step size: both methods stay put, so any gap is numerical noise.
    let ctrl = steering_options(spec, 1);
    let e0 = run_steering(&family, start, concept, Method::Euclidean, 0.0, &ctrl)?;
    let d0 = run_steering(&family, start, concept, Method::Dual, 0.0, &ctrl)?;
    let last_kl = |t: &SteeringTrace| t.records.last().and_then(|r| r.off_target_kl);
    let control_gap = match (last_kl(&e0), last_kl(&d0)) {
        (Some(a), Some(b)) => Some((a - b).abs()),
        _ => None,
    };
    Ok(Phase2Context {
        variant,
        layer: concept.layer,
        concept: concept.name.clone(),
        context_id,
        p_target_start: p_start,
        cosine: cos.value,
        cosine_degenerate: cos.degenerate,
        runs,
        control_gap,
    })
}

fn sample_trace(out: &mut String, variant: Variant, concept: &ConceptDirection, context_id: usize, t: &SteeringTrace) {
    let mut buf = String::new();
    write_trace_csv(
        &mut buf,
        &TraceRow {
            layer: concept.layer,
            context_id,
            trace: t,
        },
    );
    for line in buf.lines() {
        out.push_str(&format!("{variant},{},{line}\n", concept.name));
    }
}

fn summarize_cell(
    variant: Variant,
    layer: Readout,
    concept: &str,
    step_sizes: &[f64],
    contexts: &[Phase2Context],
) -> Phase2Cell {
    let mut eps_sorted = step_sizes.to_vec();
    eps_sorted.sort_by(f64::total_cmp);
    let by_epsilon: Vec<EpsilonAdvantage> = eps_sorted
        .iter()
        .enumerate()
        .map(|(i, &epsilon)| {
            let stops: Vec<_> = contexts.iter().map(|c| (c.runs[i].euclidean_kl, c.runs[i].dual_kl)).collect();
            EpsilonAdvantage {
                epsilon,
                advantage: kl_advantage_from_stops(&stops),
                euclidean_failures: contexts.iter().filter(|c| c.runs[i].euclidean_stop.is_none()).count(),
                dual_failures: contexts.iter().filter(|c| c.runs[i].dual_stop.is_none()).count(),
            }
        })
        .collect();
    let gaps: Vec<f64> = contexts.iter().filter_map(|c| c.control_gap).collect();
    let noise_floor = stats::mean(&gaps).unwrap_or(0.0).max(MIN_NOISE_FLOOR);
    let cosines: Vec<f64> = contexts.iter().map(|c| c.cosine).collect();
    let cosine = stats::mean(&cosines);
    let reference = by_epsilon.first().and_then(|e| e.advantage.value);
    Phase2Cell {
        variant,
        layer,
        concept: concept.to_string(),
        n_contexts: contexts.len(),
        cosine,
        verdict: cosine.map(verdict),
        n_degenerate: contexts.iter().filter(|c| c.cosine_degenerate).count(),
        sign: sign_consistency(&by_epsilon, reference, noise_floor),
        reference_epsilon: eps_sorted[0],
        noise_floor,
        by_epsilon,
        failure: None,
    }
}

fn failed_cell(variant: Variant, layer: Readout, concept: &str, spec: &FactorialSpec, why: String) -> Phase2Cell {
    Phase2Cell {
        variant,
        layer,
        concept: concept.to_string(),
        n_contexts: 0,
        cosine: None,
        verdict: None,
        n_degenerate: 0,
        by_epsilon: Vec::new(),
        reference_epsilon: spec.phase2.step_sizes.iter().copied().fold(f64::INFINITY, f64::min),
        noise_floor: MIN_NOISE_FLOOR,
        sign: SignConsistency::Undefined,
        failure: Some(why),
    }
}

type VariantSteering = (Vec<Phase2Cell>, Vec<Phase2Context>, String);

fn steer_variant(spec: &FactorialSpec, corpus: &Corpus, variant: Variant, state: &ModelState) -> Result<VariantSteering> {
    let cfg = state.config();
    let len = spec.phase2.context_length.unwrap_or(cfg.context_length);
    let starts: Vec<Vec<usize>> = corpus
        .held_out_windows(HeldOut::Steering, spec.phase2.n_contexts, len, spec.plan.seed ^ START_SEED)?
        .into_iter()
        .map(|(w, _)| w)
        .collect();
    let start_rec = state.forward_batch(&starts)?;
    let mut cells = Vec::new();
    let mut contexts = Vec::new();
    let mut traces = String::new();
    for name in &spec.phase2.concepts {
        let cspec = concept_spec(name, corpus, len, spec.phase2.prompts_per_pole, spec.plan.seed)?;
        for layer in readouts(cfg.n_layers) {
            let concept = match build_concept(state, &cspec, layer) {
                Ok(c) => c,
                Err(e) => {
                    cells.push(failed_cell(variant, layer, name, spec, e.to_string()));
                    continue;
                }
            };
            let mut cell_ctx = Vec::with_capacity(starts.len());
            let mut failure = None;
            for ci in 0..starts.len() {
                let start = start_rec.representation_in(layer, ci, len - 1)?;
                match run_context(spec, state, &concept, &start.lambda, ci, &mut traces, variant) {
                    Ok(c) => cell_ctx.push(c),
                    Err(e) => {
                        failure = Some(format!("context {ci}: {e}"));
                        break;
                    }
                }
            }
            match failure {
                Some(why) => cells.push(failed_cell(variant, layer, name, spec, why)),
                None => cells.push(summarize_cell(variant, layer, name, &spec.phase2.step_sizes, &cell_ctx)),
            }
            contexts.extend(cell_ctx);
        }
    }
    Ok((cells, contexts, traces))
}

/// Paired Euclidean/dual steering from held-out steering-pool states for
/// every variant, readout and concept. Per-cell numerical failures are
/// recorded in the cell rather than aborting the run. Returns the cells,
/// the per-context records, and sample traces (context 0 of each cell) as
/// CSV.
pub fn run_phase2(
    spec: &FactorialSpec,
    corpus: &Corpus,
    states: &[(Variant, ModelState)],
) -> Result<(Vec<Phase2Cell>, Vec<Phase2Context>, String)> {
    let per_variant = map_states(states, spec.threads, |v, state| steer_variant(spec, corpus, v, state))?;
    let mut cells = Vec::new();
    let mut contexts = Vec::new();
    let mut traces = format!("variant,concept,{TRACE_CSV_HEADER}\n");
    for (c, x, t) in per_variant {
        cells.extend(c);
        contexts.extend(x);
        traces.push_str(&t);
    }
    Ok((cells, contexts, traces))
}

/// Scatter rows for the block readouts of the first concept; the output
/// head duplicates the last block and is left out.
pub fn scatter(cells: &[Phase2Cell], concept: &str) -> Vec<ScatterPoint> {
    cells
        .iter()
        .filter(|c| c.concept == concept && matches!(c.layer, Readout::Layer(_)))
        .map(|c| ScatterPoint {
            variant: c.variant,
            layer: c.layer,
            cosine: c.cosine,
            kl_advantage: c.kl_advantage(),
        })
        .collect()
}

/// Spearman ρ over scatter points where both coordinates are defined.
pub fn scatter_correlation(points: &[ScatterPoint]) -> Option<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter_map(|p| Some((p.cosine?, p.kl_advantage?)))
        .unzip();
    stats::spearman(&x, &y)
}

#[cfg(test)]
pub(crate) fn sign_for_test(adv: &[Option<f64>], floor: f64) -> SignConsistency {
    let by: Vec<EpsilonAdvantage> = adv
        .iter()
        .enumerate()
        .map(|(i, &a)| EpsilonAdvantage {
            epsilon: i as f64,
            advantage: KlAdvantage {
                value: a,
                n_pairs: 1,
                n_used: usize::from(a.is_some()),
                n_excluded: usize::from(a.is_none()),
            },
            euclidean_failures: 0,
            dual_failures: 0,
        })
        .collect();
    sign_consistency(&by, adv[0], floor)
}
