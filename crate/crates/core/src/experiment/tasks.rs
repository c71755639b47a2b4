use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Readout;
use crate::model::{ModelState, Variant};
use crate::numerics::stable_softmax;
use crate::steering::{euclidean_step, RepresentationSource};
use crate::training::synthetic::{task_instances, Task, TaskInstance};
use crate::training::tokenize;

use super::{map_states, readouts, FactorialSpec};

const TASK_SEED: u64 = 0x5441_534b_5357;

/// Mean change in `p(correct)` after one Euclidean step of size `epsilon`
/// along `γ_correct − γ_distractor` (unit length) at `layer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskCell {
    pub variant: Variant,
    pub task: Task,
    pub layer: Readout,
    pub epsilon: f64,
    pub effect: f64,
    pub p_correct_base: f64,
    pub n_instances: usize,
}

/// Best (layer, ε) cell of one (variant, task) sweep and its scaling check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub variant: Variant,
    pub task: Task,
    pub best_layer: Readout,
    pub best_epsilon: f64,
    pub best_effect: f64,
    /// Every positive step size at the best layer moved `p(correct)` in the
    /// direction of the best effect.
    pub sign_consistent: bool,
    /// Mean effect over positive step sizes, per readout.
    pub layer_profile: Vec<(Readout, f64)>,
}

fn prompt_tokens(inst: &TaskInstance, context_length: usize) -> Vec<usize> {
    let p = tokenize(&inst.prompt);
    let skip = p.len().saturating_sub(context_length);
    p[skip..].to_vec()
}

fn p_of(logits: &[f64], y: usize) -> Result<f64> {
    Ok(stable_softmax(logits)?[y])
}

fn sweep_variant(spec: &FactorialSpec, variant: Variant, state: &ModelState) -> Result<Vec<TaskCell>> {
    let cfg = state.config();
    let family = state.family();
    let mut eps: Vec<f64> = std::iter::once(0.0).chain(spec.tasks.step_sizes.iter().copied()).collect();
    eps.sort_by(f64::total_cmp);
    let mut cells = Vec::new();
    for (ti, &task) in spec.tasks.tasks.iter().enumerate() {
        let instances = task_instances(task, spec.tasks.n_instances, spec.plan.seed ^ TASK_SEED ^ ti as u64)?;
        let prompts: Vec<Vec<usize>> = instances.iter().map(|i| prompt_tokens(i, cfg.context_length)).collect();
        for layer in readouts(cfg.n_layers) {
            let reps = state.last_token_representations(&prompts, layer)?;
            let mut sums = vec![0.0; eps.len()];
            let mut base_sum = 0.0;
            for (inst, rep) in instances.iter().zip(&reps) {
                let (c, d) = (usize::from(inst.correct), usize::from(inst.distractor));
                let raw: Vec<f64> = family.gamma(c).iter().zip(family.gamma(d)).map(|(a, b)| a - b).collect();
                let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !(n > 0.0) {
                    return Err(Error::DegenerateConcept(format!(
                        "{} instance has identical correct and distractor embeddings",
                        task.name()
                    )));
                }
                let v: Vec<f64> = raw.iter().map(|x| x / n).collect();
                let p0 = p_of(&family.logits(&rep.lambda)?, c)?;
                base_sum += p0;
                for (s, &e) in sums.iter_mut().zip(&eps) {
                    let stepped = euclidean_step(&rep.lambda, &v, e)?;
                    *s += p_of(&family.logits(&stepped)?, c)? - p0;
                }
            }
            let k = instances.len() as f64;
            for (&epsilon, s) in eps.iter().zip(sums) {
                cells.push(TaskCell {
                    variant,
                    task,
                    layer,
                    epsilon,
                    effect: s / k,
                    p_correct_base: base_sum / k,
                    n_instances: instances.len(),
                });
            }
        }
    }
    Ok(cells)
}

pub fn summarize_tasks(cells: &[TaskCell]) -> Vec<TaskSummary> {
    let mut keys: Vec<(Variant, Task)> = Vec::new();
    for c in cells {
        if !keys.contains(&(c.variant, c.task)) {
            keys.push((c.variant, c.task));
        }
    }
    keys.into_iter()
        .filter_map(|(variant, task)| {
            let mine: Vec<&TaskCell> = cells
                .iter()
                .filter(|c| c.variant == variant && c.task == task && c.epsilon > 0.0)
                .collect();
            let best = mine
                .iter()
                .copied()
                .reduce(|a, b| if b.effect > a.effect { b } else { a })?;
            let at_best: Vec<f64> = mine.iter().filter(|c| c.layer == best.layer).map(|c| c.effect).collect();
            let sign_consistent = best.effect != 0.0 && at_best.iter().all(|e| e.signum() == best.effect.signum() && *e != 0.0);
            let mut layers: Vec<Readout> = Vec::new();
            for c in &mine {
                if !layers.contains(&c.layer) {
                    layers.push(c.layer);
                }
            }
            let layer_profile = layers
                .into_iter()
                .map(|l| {
                    let e: Vec<f64> = mine.iter().filter(|c| c.layer == l).map(|c| c.effect).collect();
                    (l, e.iter().sum::<f64>() / e.len() as f64)
                })
                .collect();
            Some(TaskSummary {
                variant,
                task,
                best_layer: best.layer,
                best_epsilon: best.epsilon,
                best_effect: best.effect,
                sign_consistent,
                layer_profile,
            })
        })
        .collect()
}

/// Layer × step-size sweep of every task on every variant. Step size 0 is
/// always included as a control.
pub fn run_task_sweep(
    spec: &FactorialSpec,
    states: &[(Variant, ModelState)],
) -> Result<(Vec<TaskCell>, Vec<TaskSummary>)> {
    let per_variant = map_states(states, spec.threads, |v, state| sweep_variant(spec, v, state))?;
    let cells: Vec<TaskCell> = per_variant.into_iter().flatten().collect();
    let summaries = summarize_tasks(&cells);
    Ok((cells, summaries))
}
