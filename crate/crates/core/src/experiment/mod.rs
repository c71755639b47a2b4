//! The 2×2 factorial experiment: training the four variants, Phase-1
//! Hessian measurement, Phase-2 steering, task sweeps and report rendering.
//!
//! Each stage is a pure function of its inputs. Stages exchange data
//! through [`FactorialResult`], which is also what `raw/*.jsonl` stores, so
//! a report can be re-rendered from disk without recomputation.

mod io;
mod phase1;
mod phase2;
mod report;
mod stats;
mod tasks;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Readout;
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelState, Variant};
use crate::steering::{DualMode, DEFAULT_STEP_SIZES};
use crate::training::{self, loss_curve_csv, Corpus, TrainPlan};

pub use io::{read_jsonl, write_atomic, write_jsonl, RAW_SCHEMA_VERSION};
pub use phase1::{run_phase1, ContextMetrics, Phase1Cell};
pub use phase2::{
    concept_spec, run_phase2, scatter, scatter_correlation, EpsilonAdvantage, Phase2Cell, Phase2Context, RunPair,
    ScatterPoint, SignConsistency, CONCEPT_NAMES,
};
pub use report::{render_report, write_manifest, Manifest, ManifestEntry};
pub use stats::{median, spearman};
pub use tasks::{run_task_sweep, summarize_tasks, TaskCell, TaskSummary};

pub use crate::training::synthetic::Task;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase1Spec {
    pub n_batches: usize,
    pub batch_size: usize,
    /// Capped at the vocabulary size.
    pub top_k: usize,
    /// Context window length; the model's context length when unset.
    pub context_length: Option<usize>,
}

impl Default for Phase1Spec {
    fn default() -> Self {
        Phase1Spec {
            n_batches: 30,
            batch_size: 16,
            top_k: crate::geometry::DEFAULT_TOP_K,
            context_length: None,
        }
    }
}

impl Phase1Spec {
    pub fn n_contexts(&self) -> usize {
        self.n_batches * self.batch_size
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase2Spec {
    /// Concept names, see [`CONCEPT_NAMES`]. Tables use the first.
    pub concepts: Vec<String>,
    pub n_contexts: usize,
    pub step_sizes: Vec<f64>,
    pub max_steps: usize,
    pub dual_mode: DualMode,
    /// Labelled prompts per pole for activation-difference concepts.
    pub prompts_per_pole: usize,
    pub context_length: Option<usize>,
}

impl Default for Phase2Spec {
    fn default() -> Self {
        Phase2Spec {
            concepts: vec!["capitalization".into()],
            n_contexts: 10,
            step_sizes: DEFAULT_STEP_SIZES.to_vec(),
            max_steps: 400,
            dual_mode: DualMode::default(),
            prompts_per_pole: 40,
            context_length: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub tasks: Vec<Task>,
    pub n_instances: usize,
    pub step_sizes: Vec<f64>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            tasks: Task::ALL.to_vec(),
            n_instances: 50,
            step_sizes: DEFAULT_STEP_SIZES.to_vec(),
        }
    }
}

/// Corpus selection: user files, or the bundled sample plus synthetic lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub paths: Vec<PathBuf>,
    pub synthetic_lines_per_task: usize,
    pub prose_repeats: usize,
    pub chunk: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            paths: Vec::new(),
            synthetic_lines_per_task: 3000,
            prose_repeats: 3,
            chunk: Corpus::DEFAULT_CHUNK,
        }
    }
}

impl CorpusSpec {
    pub fn load(&self, seed: u64) -> Result<Corpus> {
        if self.paths.is_empty() {
            let bytes = training::synthetic::default_corpus(seed, self.synthetic_lines_per_task, self.prose_repeats);
            Corpus::from_bytes(&bytes, seed, self.chunk)
        } else {
            Corpus::from_files(&self.paths, seed, self.chunk)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorialSpec {
    pub base: ModelConfig,
    pub plan: TrainPlan,
    pub corpus: CorpusSpec,
    pub phase1: Phase1Spec,
    pub phase2: Phase2Spec,
    pub tasks: TaskSpec,
    pub variants: Vec<Variant>,
    /// Worker threads for per-variant parallelism; 1 is fully sequential.
    pub threads: usize,
    pub out_dir: PathBuf,
}

impl FactorialSpec {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        FactorialSpec {
            base: ModelConfig::default(),
            plan: TrainPlan::default(),
            corpus: CorpusSpec::default(),
            phase1: Phase1Spec::default(),
            phase2: Phase2Spec::default(),
            tasks: TaskSpec::default(),
            variants: Variant::ALL.to_vec(),
            threads: 1,
            out_dir: out_dir.into(),
        }
    }

    /// A desk-scale preset: four layers of width 32 over 64-byte contexts,
    /// trained long enough for the layer profiles to take shape.
    pub fn small(out_dir: impl Into<PathBuf>) -> Self {
        let mut s = FactorialSpec::new(out_dir);
        s.base = ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 32,
            context_length: 64,
            ..ModelConfig::default()
        };
        s.plan = TrainPlan {
            steps: 1000,
            learning_rate: 1e-3,
            warmup_steps: 50,
            checkpoint_every: 250,
            ..TrainPlan::default()
        };
        // At ε = 0.05 most runs need more than 400 steps to reach the 80% stop.
        s.phase2.max_steps = 1500;
        s
    }

    /// A seconds-scale preset for smoke tests: two layers, width 16.
    pub fn toy(out_dir: impl Into<PathBuf>) -> Self {
        let mut s = FactorialSpec::new(out_dir);
        s.base = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            context_length: 32,
            ..ModelConfig::default()
        };
        s.plan = TrainPlan {
            steps: 30,
            batch_size: 8,
            learning_rate: 3e-3,
            warmup_steps: 5,
            checkpoint_every: 10,
            val_batches: 2,
            ..TrainPlan::default()
        };
        s.corpus.synthetic_lines_per_task = 300;
        s.corpus.prose_repeats = 1;
        s.phase1.n_batches = 4;
        s.phase1.batch_size = 8;
        s.phase2.n_contexts = 3;
        s.phase2.max_steps = 60;
        s.phase2.prompts_per_pole = 8;
        s.tasks.n_instances = 10;
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.plan.validate()?;
        let mut bad = Vec::new();
        if self.variants.is_empty() {
            bad.push("no variants selected".to_string());
        }
        if self.phase1.n_batches == 0 || self.phase1.batch_size == 0 {
            bad.push("phase1 needs at least one context".to_string());
        }
        if self.phase1.top_k < 2 {
            bad.push(format!("phase1.top_k = {} (need >= 2)", self.phase1.top_k));
        }
        for (name, len) in [
            ("phase1.context_length", self.phase1.context_length),
            ("phase2.context_length", self.phase2.context_length),
        ] {
            if let Some(l) = len {
                if l == 0 || l > self.base.context_length {
                    bad.push(format!("{name} = {l} (need 1..={})", self.base.context_length));
                }
            }
        }
        if self.phase2.concepts.is_empty() {
            bad.push("phase2.concepts is empty".to_string());
        }
        for c in &self.phase2.concepts {
            if !CONCEPT_NAMES.contains(&c.as_str()) {
                bad.push(format!("unknown concept '{c}' (valid: {})", CONCEPT_NAMES.join(", ")));
            }
        }
        if self.phase2.n_contexts == 0 || self.phase2.prompts_per_pole == 0 {
            bad.push("phase2 needs contexts and prompts".to_string());
        }
        for (name, eps) in [("phase2.step_sizes", &self.phase2.step_sizes), ("tasks.step_sizes", &self.tasks.step_sizes)] {
            if eps.is_empty() || eps.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
                bad.push(format!("{name} must be non-empty and positive"));
            }
        }
        if self.tasks.n_instances == 0 {
            bad.push("tasks.n_instances = 0".to_string());
        }
        if self.threads == 0 {
            bad.push("threads = 0".to_string());
        }
        if self.base.vocab_size != training::BYTE_VOCAB {
            bad.push(format!(
                "vocab_size = {} but the byte tokenizer needs {}",
                self.base.vocab_size,
                training::BYTE_VOCAB
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    pub fn checkpoint_path(&self, v: Variant) -> PathBuf {
        self.checkpoint_dir().join(format!("{}.blns", v.name()))
    }

    pub fn raw_dir(&self) -> PathBuf {
        self.out_dir.join("raw")
    }
}

/// Readouts measured per model: every block, then the output head.
pub fn readouts(n_layers: usize) -> Vec<Readout> {
    (0..n_layers).map(Readout::Layer).chain([Readout::Final]).collect()
}

/// Everything the report renders.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FactorialResult {
    pub n_layers: usize,
    pub variants: Vec<Variant>,
    pub phase1: Vec<Phase1Cell>,
    pub phase2: Vec<Phase2Cell>,
    pub contexts: Vec<Phase2Context>,
    pub tasks: Vec<TaskCell>,
    pub task_summaries: Vec<TaskSummary>,
}

impl FactorialResult {
    pub fn is_empty(&self) -> bool {
        self.phase1.is_empty() && self.phase2.is_empty() && self.tasks.is_empty()
    }

    pub fn phase1_cell(&self, v: Variant, layer: Readout) -> Option<&Phase1Cell> {
        self.phase1.iter().find(|c| c.variant == v && c.layer == layer)
    }

    /// Block readouts other than the last, whose readout is the output head's.
    pub fn intermediate_layers(&self) -> Vec<Readout> {
        (0..self.n_layers.saturating_sub(1)).map(Readout::Layer).collect()
    }

    pub fn phase2_cell(&self, v: Variant, layer: Readout, concept: &str) -> Option<&Phase2Cell> {
        self.phase2
            .iter()
            .find(|c| c.variant == v && c.layer == layer && c.concept == concept)
    }
}

/// Runs `f` for each variant, on `threads` workers when more than one.
/// Results keep variant order, and each call is internally sequential, so
/// output does not depend on the thread count.
pub fn map_variants<T, F>(variants: &[Variant], threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Variant) -> Result<T> + Sync + Send,
{
    if threads <= 1 || variants.len() <= 1 {
        return variants.iter().map(|&v| f(v)).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| variants.par_iter().map(|&v| f(v)).collect())
}

/// [`map_variants`] over loaded models.
pub fn map_states<T, F>(states: &[(Variant, ModelState)], threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Variant, &ModelState) -> Result<T> + Sync + Send,
{
    let variants: Vec<Variant> = states.iter().map(|(v, _)| *v).collect();
    map_variants(&variants, threads, |v| {
        let (_, state) = states.iter().find(|(sv, _)| *sv == v).expect("variant taken from states");
        f(v, state)
    })
}

/// Per-variant training record written next to the checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub variant: Variant,
    pub param_count: usize,
    pub data_digest: String,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
}

/// Trains every requested variant and writes checkpoints and loss curves.
pub fn train_variants(
    spec: &FactorialSpec,
    corpus: &Corpus,
    progress: &(dyn Fn(Variant, &training::LossRow) + Sync),
) -> Result<Vec<TrainRecord>> {
    spec.validate()?;
    let dir = spec.checkpoint_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let records = map_variants(&spec.variants, spec.threads, |v| {
        let state = ModelState::init(&v.configure(&spec.base))?;
        let param_count = state.param_count();
        let out = training::train(state, corpus, &spec.plan, |row| progress(v, row))?;
        let ckpt = spec.checkpoint_path(v);
        save_checkpoint(&out.state, &ckpt)?;
        let curve = dir.join(format!("{}_loss.csv", v.name()));
        write_atomic(&curve, loss_curve_csv(&out.curve).as_bytes())?;
        Ok(TrainRecord {
            variant: v,
            param_count,
            data_digest: out.data_digest.clone(),
            final_train_loss: out.curve.last().map(|r| r.train_loss),
            final_val_loss: out.final_val_loss(),
            checkpoint: ckpt,
            loss_curve: curve,
        })
    })?;
    write_jsonl(&dir.join("train.jsonl"), &records)?;
    Ok(records)
}

/// Loads the checkpoints of every requested variant, checking configs.
pub fn load_variants(spec: &FactorialSpec) -> Result<Vec<(Variant, ModelState)>> {
    spec.variants
        .iter()
        .map(|&v| {
            let path = spec.checkpoint_path(v);
            if !path.exists() {
                return Err(Error::Config(format!(
                    "missing checkpoint for {v}: expected {}",
                    path.display()
                )));
            }
            Ok((v, load_checkpoint(&path, Some(&v.configure(&spec.base)))?))
        })
        .collect()
}

/// The whole pipeline: train, measure, steer, sweep tasks, render.
pub fn run_all(
    spec: &FactorialSpec,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<(FactorialResult, Manifest)> {
    spec.validate()?;
    let corpus = spec.corpus.load(spec.plan.seed)?;
    progress("training");
    train_variants(spec, &corpus, &|v, row| {
        if (row.step + 1) % spec.plan.checkpoint_every == 0 {
            progress(&format!("{v} step {} loss {:.4}", row.step + 1, row.train_loss));
        }
    })?;
    let states = load_variants(spec)?;
    let mut result = FactorialResult {
        n_layers: spec.base.n_layers,
        variants: spec.variants.clone(),
        ..FactorialResult::default()
    };
    progress("phase 1: hessian spectra");
    result.phase1 = run_phase1(spec, &corpus, &states)?;
    write_stage(spec, "phase1", &result)?;
    progress("phase 2: steering");
    let (cells, contexts, traces) = run_phase2(spec, &corpus, &states)?;
    result.phase2 = cells;
    result.contexts = contexts;
    write_atomic(&spec.raw_dir().join("steering_traces.csv"), traces.as_bytes())?;
    write_stage(spec, "phase2", &result)?;
    progress("task sweep");
    let (cells, summaries) = run_task_sweep(spec, &states)?;
    result.tasks = cells;
    result.task_summaries = summaries;
    write_stage(spec, "tasks", &result)?;
    progress("report");
    let manifest = render_report(&result, &spec.out_dir)?;
    Ok((result, manifest))
}

/// Persists one stage's raw records under `raw/`.
pub fn write_stage(spec: &FactorialSpec, stage: &str, result: &FactorialResult) -> Result<PathBuf> {
    let path = spec.raw_dir().join(format!("{stage}.jsonl"));
    match stage {
        "phase1" => write_jsonl(&path, &result.phase1)?,
        "phase2" => {
            write_jsonl(&path, &result.phase2)?;
            write_jsonl(&spec.raw_dir().join("phase2_contexts.jsonl"), &result.contexts)?;
        }
        "tasks" => {
            write_jsonl(&path, &result.tasks)?;
            write_jsonl(&spec.raw_dir().join("task_summaries.jsonl"), &result.task_summaries)?;
        }
        other => return Err(Error::Contract(format!("unknown stage '{other}'"))),
    }
    Ok(path)
}

/// Rebuilds a result from `raw/`; every stage file must exist.
pub fn load_result(spec: &FactorialSpec) -> Result<FactorialResult> {
    let raw = spec.raw_dir();
    let need = |name: &str| -> Result<PathBuf> {
        let p = raw.join(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    };
    Ok(FactorialResult {
        n_layers: spec.base.n_layers,
        variants: spec.variants.clone(),
        phase1: read_jsonl(&need("phase1.jsonl")?)?,
        phase2: read_jsonl(&need("phase2.jsonl")?)?,
        contexts: read_jsonl(&need("phase2_contexts.jsonl")?)?,
        tasks: read_jsonl(&need("tasks.jsonl")?)?,
        task_summaries: read_jsonl(&need("task_summaries.jsonl")?)?,
    })
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
