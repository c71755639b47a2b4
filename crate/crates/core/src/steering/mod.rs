//! Concept directions, Euclidean vs. dual steering, and the primal/dual
//! cosine diagnostic.
//!
//! Both steering methods take steps of Euclidean length `ε` in `λ` space.
//! The Euclidean step moves along the concept vector `v`; the dual step
//! moves along `(H + δI)⁻¹ v`, the damped natural-gradient image of `v`.
//! Runs stop once the target set holds 80% of the probability mass.

mod concept;

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{hessian_matrix, Readout, SoftmaxFamily};
use crate::numerics::{eigh, log_sum_exp, Tensor};

pub use concept::{build_concept, ConceptDirection, ConceptMode, ConceptSpec, Pole, RepresentationSource};

/// Probability the target set must reach for a run to count as a success.
pub const STOP_THRESHOLD: f64 = 0.8;
/// `δ = DAMPING_SCALE · tr(H) / d`.
pub const DAMPING_SCALE: f64 = 1e-4;
/// Lower bound on `δ` for a collapsed (`tr H = 0`) Hessian.
pub const MIN_DAMPING: f64 = 1e-12;
pub const DEFAULT_STEP_SIZES: [f64; 6] = [0.05, 0.1, 0.2, 0.4, 0.8, 1.6];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euclidean,
    Dual,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euclidean => "euclidean",
            Method::Dual => "dual",
        })
    }
}

/// What the dual step preconditions.
///
/// The concept-vector form moves `η` along `v`. With steps normalized to
/// Euclidean length it spends almost all of each step in the flattest
/// directions of `H` and, on anisotropic geometry, typically never reaches
/// the stop threshold. The natural-gradient form is therefore the default
/// for steering runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualMode {
    /// `(H + δI)⁻¹ v`.
    ConceptVector,
    /// `(H + δI)⁻¹ ∇_λ log p(T | λ)`, natural-gradient ascent on the
    /// target log-probability.
    #[default]
    TargetLogProb,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn check_dims(lambda: &[f64], v: &[f64]) -> Result<()> {
    if lambda.len() != v.len() {
        return Err(Error::Dimension(format!(
            "representation has dimension {}, direction {}",
            lambda.len(),
            v.len()
        )));
    }
    Ok(())
}

/// `λ + ε v`.
pub fn euclidean_step(lambda: &[f64], v: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_dims(lambda, v)?;
    Ok(lambda.iter().zip(v).map(|(l, x)| l + eps * x).collect())
}

/// Proportional damping for `H`.
pub fn default_damping(h: &Tensor) -> f64 {
    (DAMPING_SCALE * h.trace() / h.rows() as f64).max(MIN_DAMPING)
}

/// `(H + δI)⁻¹ b` through the eigendecomposition of `H`; negative
/// round-off eigenvalues are treated as zero.
pub fn damped_solve(h: &Tensor, b: &[f64], delta: f64) -> Result<Vec<f64>> {
    if !(delta > 0.0) {
        return Err(Error::Contract(format!("damping must be positive, got {delta}")));
    }
    check_dims(b, &vec![0.0; h.rows()])?;
    let eig = eigh(h)?;
    Ok(eig.apply_spectral(b, |mu| 1.0 / (mu.max(0.0) + delta)))
}

/// Unit-length dual direction at `λ`.
pub fn dual_direction(
    family: &SoftmaxFamily,
    lambda: &[f64],
    v: &[f64],
    target: &[usize],
    mode: DualMode,
    delta: Option<f64>,
) -> Result<Vec<f64>> {
    check_dims(lambda, v)?;
    let h = hessian_matrix(family, lambda, family.vocab())?;
    let delta = delta.unwrap_or_else(|| default_damping(&h));
    let rhs = match mode {
        DualMode::ConceptVector => v.to_vec(),
        DualMode::TargetLogProb => target_log_prob_gradient(family, lambda, target)?,
    };
    let u = damped_solve(&h, &rhs, delta)?;
    let n = norm(&u);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Numeric(format!("dual direction has norm {n}")));
    }
    Ok(u.iter().map(|x| x / n).collect())
}

/// `λ + ε u/‖u‖` with `u = (H(λ) + δI)⁻¹ v`.
pub fn dual_step(family: &SoftmaxFamily, lambda: &[f64], v: &[f64], eps: f64, delta: f64) -> Result<Vec<f64>> {
    let u = dual_direction(family, lambda, v, &[], DualMode::ConceptVector, Some(delta))?;
    euclidean_step(lambda, &u, eps)
}

/// `∇_λ log p(T|λ) = E[γ | y ∈ T] − E[γ]`.
pub fn target_log_prob_gradient(family: &SoftmaxFamily, lambda: &[f64], target: &[usize]) -> Result<Vec<f64>> {
    let p = family.probs(lambda)?;
    let d = family.dim();
    let mut eta = vec![0.0; d];
    let mut eta_t = vec![0.0; d];
    let mut mass_t = 0.0;
    let mut in_t = vec![false; p.len()];
    for &t in target {
        in_t[t] = true;
    }
    for (y, &py) in p.iter().enumerate() {
        let g = family.gamma(y);
        for j in 0..d {
            eta[j] += py * g[j];
            if in_t[y] {
                eta_t[j] += py * g[j];
            }
        }
        if in_t[y] {
            mass_t += py;
        }
    }
    if !(mass_t > 0.0) {
        return Err(Error::Numeric("target set has zero probability".into()));
    }
    Ok(eta_t.iter().zip(&eta).map(|(a, b)| a / mass_t - b).collect())
}

fn target_mask(vocab: usize, target: &[usize]) -> Result<Vec<bool>> {
    let mut m = vec![false; vocab];
    for &t in target {
        if t >= vocab {
            return Err(Error::Validation(format!("target token {t} outside vocabulary {vocab}")));
        }
        m[t] = true;
    }
    Ok(m)
}

/// Off-target mass below this leaves the restricted distribution undefined.
pub const MIN_OFF_TARGET_MASS: f64 = 1e-12;

/// `KL(q_s ‖ q_b)` where `q` is the distribution with the target set removed
/// and renormalized. Computed from logits. `None` when either distribution
/// has (almost) no off-target mass.
pub fn off_target_kl_from_logits(z_base: &[f64], z_steered: &[f64], target: &[usize]) -> Result<Option<f64>> {
    if z_base.len() != z_steered.len() {
        return Err(Error::Dimension("logit vectors differ in length".into()));
    }
    let mask = target_mask(z_base.len(), target)?;
    let off: Vec<usize> = (0..z_base.len()).filter(|&y| !mask[y]).collect();
    if off.is_empty() {
        return Err(Error::Contract("target set covers the whole vocabulary".into()));
    }
    let pick = |z: &[f64]| off.iter().map(|&y| z[y]).collect::<Vec<_>>();
    let (zb, zs) = (pick(z_base), pick(z_steered));
    let (lb, ls) = (log_sum_exp(&zb), log_sum_exp(&zs));
    let mass_ok = |restricted: f64, z: &[f64]| (restricted - log_sum_exp(z)).exp() >= MIN_OFF_TARGET_MASS;
    if !mass_ok(lb, z_base) || !mass_ok(ls, z_steered) {
        return Ok(None);
    }
    let mut kl = 0.0;
    for (b, s) in zb.iter().zip(&zs) {
        let log_qs = s - ls;
        let log_qb = b - lb;
        kl += log_qs.exp() * (log_qs - log_qb);
    }
    Ok(Some(kl.max(0.0)))
}

pub fn off_target_kl(
    family: &SoftmaxFamily,
    lambda_base: &[f64],
    lambda_steered: &[f64],
    target: &[usize],
) -> Result<Option<f64>> {
    off_target_kl_from_logits(&family.logits(lambda_base)?, &family.logits(lambda_steered)?, target)
}

/// `p(T | λ)`.
pub fn target_probability(family: &SoftmaxFamily, lambda: &[f64], target: &[usize]) -> Result<f64> {
    let p = family.probs(lambda)?;
    let mask = target_mask(p.len(), target)?;
    Ok(p.iter().zip(&mask).filter(|(_, &m)| m).map(|(x, _)| x).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lambda: Vec<f64>,
    pub p_target: f64,
    pub off_target_kl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringTrace {
    pub method: Method,
    pub epsilon: f64,
    pub records: Vec<StepRecord>,
    /// First step with `p(T) ≥ 0.8`; `None` means the run failed.
    pub stop_step: Option<usize>,
}

impl SteeringTrace {
    pub fn failed(&self) -> bool {
        self.stop_step.is_none()
    }

    /// Off-target KL at the stop step.
    pub fn kl_at_stop(&self) -> Option<f64> {
        self.stop_step.and_then(|s| self.records[s].off_target_kl)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringOptions {
    pub max_steps: usize,
    pub dual_mode: DualMode,
    pub threshold: f64,
}

impl Default for SteeringOptions {
    fn default() -> Self {
        SteeringOptions {
            max_steps: 400,
            dual_mode: DualMode::default(),
            threshold: STOP_THRESHOLD,
        }
    }
}

/// Iterates `method` from `start` until `p(T) ≥ threshold` or `max_steps`.
pub fn run_steering(
    family: &SoftmaxFamily,
    start: &[f64],
    concept: &ConceptDirection,
    method: Method,
    eps: f64,
    opts: &SteeringOptions,
) -> Result<SteeringTrace> {
    check_dims(start, &concept.v)?;
    let z0 = family.logits(start)?;
    let record = |step: usize, lambda: Vec<f64>| -> Result<StepRecord> {
        let z = family.logits(&lambda)?;
        let p = crate::numerics::stable_softmax(&z)?;
        let p_target = concept.target.iter().map(|&t| p[t]).sum();
        Ok(StepRecord {
            step,
            lambda,
            p_target,
            off_target_kl: off_target_kl_from_logits(&z0, &z, &concept.target)?,
        })
    };
    let mut records = vec![record(0, start.to_vec())?];
    let mut stop_step = (records[0].p_target >= opts.threshold).then_some(0);
    let mut step = 0;
    while stop_step.is_none() && step < opts.max_steps {
        step += 1;
        let lambda = &records[step - 1].lambda;
        let next = match method {
            Method::Euclidean => euclidean_step(lambda, &concept.v, eps)?,
            Method::Dual => {
                let u = dual_direction(family, lambda, &concept.v, &concept.target, opts.dual_mode, None)?;
                euclidean_step(lambda, &u, eps)?
            }
        };
        let rec = record(step, next)?;
        if rec.p_target >= opts.threshold {
            stop_step = Some(step);
        }
        records.push(rec);
    }
    Ok(SteeringTrace {
        method,
        epsilon: eps,
        records,
        stop_step,
    })
}

/// Mean of `KL_euclid − KL_dual` at the stop steps of paired runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlAdvantage {
    /// `None` when no pair succeeded on both sides.
    pub value: Option<f64>,
    pub n_pairs: usize,
    pub n_used: usize,
    /// Pairs excluded because either run failed or its KL was undefined.
    pub n_excluded: usize,
}

pub fn kl_advantage_from_stops(pairs: &[(Option<f64>, Option<f64>)]) -> KlAdvantage {
    let diffs: Vec<f64> = pairs
        .iter()
        .filter_map(|&(e, d)| Some(e? - d?))
        .collect();
    KlAdvantage {
        value: (!diffs.is_empty()).then(|| diffs.iter().sum::<f64>() / diffs.len() as f64),
        n_pairs: pairs.len(),
        n_used: diffs.len(),
        n_excluded: pairs.len() - diffs.len(),
    }
}

/// `traces` holds `(euclidean, dual)` runs from identical start states.
pub fn kl_advantage(traces: &[(SteeringTrace, SteeringTrace)]) -> Result<KlAdvantage> {
    for (e, d) in traces {
        if e.method != Method::Euclidean || d.method != Method::Dual {
            return Err(Error::Contract("kl_advantage expects (euclidean, dual) pairs".into()));
        }
        if e.records[0].lambda != d.records[0].lambda {
            return Err(Error::Contract("paired traces start from different states".into()));
        }
    }
    let stops: Vec<_> = traces.iter().map(|(e, d)| (e.kl_at_stop(), d.kl_at_stop())).collect();
    Ok(kl_advantage_from_stops(&stops))
}

/// Which image of `v` the cosine diagnostic compares against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualImage {
    /// `w = H v`, the primal-to-dual pushforward.
    #[default]
    Hessian,
    /// `w = (H + δI)⁻¹ v`.
    InverseHessian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cosine {
    pub value: f64,
    /// `‖w‖` vanished relative to the scale of `H`; `value` is 0.
    pub degenerate: bool,
}

/// Cosine between `v` and its dual image under a given `H`.
pub fn cosine_from_hessian(h: &Tensor, v: &[f64], image: DualImage) -> Result<Cosine> {
    check_dims(v, &vec![0.0; h.rows()])?;
    let nv = norm(v);
    if !(nv > 0.0) {
        return Err(Error::Contract("cosine diagnostic needs a nonzero direction".into()));
    }
    let w = match image {
        DualImage::Hessian => h.matvec(v)?,
        DualImage::InverseHessian => damped_solve(h, v, default_damping(h))?,
    };
    let nw = norm(&w);
    let d = h.rows() as f64;
    let floor = match image {
        DualImage::Hessian => 1e-14 * nv * h.trace() / d,
        DualImage::InverseHessian => 0.0,
    };
    if !(nw > floor) || nw == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    let c = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / (nv * nw);
    Ok(Cosine {
        value: c.clamp(-1.0, 1.0),
        degenerate: false,
    })
}

pub fn cosine_diagnostic(family: &SoftmaxFamily, lambda: &[f64], v: &[f64], image: DualImage) -> Result<Cosine> {
    let h = hessian_matrix(family, lambda, family.vocab())?;
    cosine_from_hessian(&h, v, image)
}

/// Deployment verdict for a cosine value. Buckets are closed-open:
/// `[−1, 0.3)` unreliable, `[0.3, 0.4)` caution, `[0.4, 1]` sound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Unreliable,
    Caution,
    Sound,
}

pub const UNRELIABLE_BELOW: f64 = 0.3;
pub const SOUND_FROM: f64 = 0.4;

pub fn verdict(cos: f64) -> Verdict {
    if cos < UNRELIABLE_BELOW {
        Verdict::Unreliable
    } else if cos < SOUND_FROM {
        Verdict::Caution
    } else {
        Verdict::Sound
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Unreliable => "unreliable",
            Verdict::Caution => "caution",
            Verdict::Sound => "sound",
        })
    }
}

/// One labelled trace for CSV export.
pub struct TraceRow<'a> {
    pub layer: Readout,
    pub context_id: usize,
    pub trace: &'a SteeringTrace,
}

pub const TRACE_CSV_HEADER: &str = "method,layer,context_id,epsilon,step,p_target,off_target_kl,stopped";

/// Appends one line per step; `stopped` is 1 on the stop step only.
pub fn write_trace_csv(out: &mut String, row: &TraceRow) {
    let t = row.trace;
    for r in &t.records {
        let kl = r.off_target_kl.map(|k| format!("{k:.10e}")).unwrap_or_default();
        let stopped = u8::from(t.stop_step == Some(r.step));
        writeln!(
            out,
            "{},{},{},{},{},{:.10},{},{}",
            t.method, row.layer, row.context_id, t.epsilon, r.step, r.p_target, kl, stopped
        )
        .unwrap();
    }
}
