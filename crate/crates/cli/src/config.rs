//! Run configuration: preset defaults, then a TOML file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bregman_lens::experiment::{CorpusSpec, FactorialSpec, Phase1Spec, Phase2Spec, TaskSpec};
use bregman_lens::model::{ModelConfig, Variant};
use bregman_lens::training::TrainPlan;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-size defaults: 4 layers, width 64, 2000 steps, 480 contexts.
    Default,
    /// Desk-scale run used for the directional checks.
    Small,
    /// Seconds-scale smoke test.
    Toy,
}

impl Preset {
    fn spec(self, out: &Path) -> FactorialSpec {
        match self {
            Preset::Default => FactorialSpec::new(out),
            Preset::Small => FactorialSpec::small(out),
            Preset::Toy => FactorialSpec::toy(out),
        }
    }
}

/// Everything a configuration file may set. Each section mirrors one
/// stage; keys not listed here are rejected by name.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub threads: usize,
    pub variants: Vec<Variant>,
    pub model: ModelConfig,
    pub train: TrainPlan,
    pub corpus: CorpusSpec,
    pub phase1: Phase1Spec,
    pub phase2: Phase2Spec,
    pub tasks: TaskSpec,
}

impl RunConfig {
    fn from_spec(preset: Preset, s: FactorialSpec) -> Self {
        RunConfig {
            preset,
            threads: s.threads,
            variants: s.variants,
            model: s.base,
            train: s.plan,
            corpus: s.corpus,
            phase1: s.phase1,
            phase2: s.phase2,
            tasks: s.tasks,
        }
    }

    pub fn into_spec(self, out: PathBuf) -> FactorialSpec {
        FactorialSpec {
            base: self.model,
            plan: self.train,
            corpus: self.corpus,
            phase1: self.phase1,
            phase2: self.phase2,
            tasks: self.tasks,
            variants: self.variants,
            threads: self.threads,
            out_dir: out,
        }
    }
}

/// Overlays `over` onto `base`, table by table.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Command-line values that override the file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub steps: Option<usize>,
    pub variants: Option<Vec<Variant>>,
}

/// Resolves defaults < file < flags and validates the result.
pub fn resolve(file: Option<&Path>, out: PathBuf, o: &Overrides) -> Result<FactorialSpec> {
    let text = match file {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    let table: toml::Table = text
        .parse()
        .with_context(|| format!("parsing config {}", file.map(|p| p.display().to_string()).unwrap_or_default()))?;
    let file_preset = match table.get("preset") {
        Some(v) => Some(Preset::deserialize(v.clone()).context("config key 'preset'")?),
        None => None,
    };
    let preset = o.preset.or(file_preset).unwrap_or(Preset::Default);
    let mut value = toml::Value::try_from(RunConfig::from_spec(preset, preset.spec(&out)))?;
    merge(&mut value, toml::Value::Table(table));
    if let Some(t) = value.as_table_mut() {
        t.insert("preset".into(), toml::Value::try_from(preset)?);
    }
    let cfg = RunConfig::deserialize(value).map_err(|e| match file {
        Some(p) => anyhow::anyhow!("invalid config {}: {e}", p.display()),
        None => anyhow::anyhow!("invalid configuration: {e}"),
    })?;
    let mut spec = cfg.into_spec(out);
    if let Some(seed) = o.seed {
        spec.plan.seed = seed;
        spec.base.seed = seed;
    }
    if let Some(t) = o.threads {
        spec.threads = t;
    }
    if let Some(s) = o.steps {
        spec.plan.steps = s;
    }
    if let Some(v) = &o.variants {
        spec.variants = v.clone();
    }
    if spec.plan.steps == 0 {
        bail!("train.steps must be at least 1");
    }
    spec.validate().context("configuration")?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("run.toml");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let spec = resolve(None, "o".into(), &Overrides::default()).unwrap();
        assert_eq!(spec, FactorialSpec::new("o"));
    }

    #[test]
    fn file_overrides_defaults_and_flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "preset = \"toy\"\nthreads = 2\n[train]\nsteps = 7\nseed = 5\n[phase2]\nmax_steps = 9\n",
        );
        let spec = resolve(Some(&p), "o".into(), &Overrides::default()).unwrap();
        assert_eq!(spec.base.d_model, 16);
        assert_eq!((spec.plan.steps, spec.plan.seed, spec.threads), (7, 5, 2));
        assert_eq!(spec.phase2.max_steps, 9);
        let o = Overrides {
            seed: Some(11),
            steps: Some(3),
            ..Overrides::default()
        };
        let spec = resolve(Some(&p), "o".into(), &o).unwrap();
        assert_eq!((spec.plan.steps, spec.plan.seed, spec.base.seed), (3, 11, 11));
    }

    #[test]
    fn unknown_keys_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "[phase1]\nn_batchez = 3\n");
        let msg = format!("{:#}", resolve(Some(&p), "o".into(), &Overrides::default()).unwrap_err());
        assert!(msg.contains("n_batchez"), "{msg}");
        let p = write(dir.path(), "colour = 1\n");
        let msg = format!("{:#}", resolve(Some(&p), "o".into(), &Overrides::default()).unwrap_err());
        assert!(msg.contains("colour"), "{msg}");
    }

    #[test]
    fn invalid_values_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "[model]\nd_model = 30\nn_heads = 4\n");
        let msg = format!("{:#}", resolve(Some(&p), "o".into(), &Overrides::default()).unwrap_err());
        assert!(msg.contains("d_model"), "{msg}");
    }
}
