//! `blns`: train the 2×2 grid, measure Hessian spectra, steer, sweep tasks
//! and render the report, as one pipeline or stage by stage.

mod config;
mod diagnose;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bregman_lens::experiment::{
    self, load_result, load_variants, render_report, run_phase1, run_phase2, run_task_sweep, write_atomic,
    write_stage, FactorialResult, FactorialSpec, Manifest,
};
use bregman_lens::geometry::Readout;
use bregman_lens::model::Variant;
use clap::{Args, Parser, Subcommand};

use config::{Overrides, Preset};

#[derive(Parser, Debug)]
#[command(name = "blns", version, about = "Softmax Hessian conditioning and steering diagnostics for toy transformers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Seed for initialization and data order [default: from config, else 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, env = "BLNS_OUT", default_value = "blns-out")]
    out: PathBuf,
    /// TOML configuration file with [model], [train], [corpus], [phase1], [phase2] and [tasks] sections
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads across variants; 1 keeps outputs bit-exact [default: from config, else 1]
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Size preset the config file and flags are applied on top of [default: from config, else default]
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one variant or all four
    Train {
        /// `all` or one of cascade_aux, cascade_control, single_aux, single_control
        #[arg(long, default_value = "all", value_parser = parse_variants)]
        variant: VariantSet,
        /// Training steps [default: from config]
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Hessian spectra per variant and layer (needs checkpoints)
    Hessian,
    /// Paired Euclidean and dual steering (needs checkpoints)
    Steer,
    /// Layer by step-size task sweeps (needs checkpoints)
    Tasks,
    /// Render tables, figures and the manifest from raw records
    Report,
    /// Train, measure, steer, sweep and render in one go
    RunAll {
        /// Training steps [default: from config]
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Cosine diagnostic and verdict for one concept at one layer
    Diagnose(diagnose::DiagnoseArgs),
}

#[derive(Clone, Debug)]
struct VariantSet(Vec<Variant>);

fn parse_variants(s: &str) -> std::result::Result<VariantSet, String> {
    if s == "all" {
        return Ok(VariantSet(Variant::ALL.to_vec()));
    }
    s.split(',')
        .map(|p| p.trim().parse::<Variant>().map_err(|e| format!("{e}, or all")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(VariantSet)
}

fn spec_for(common: &Common, steps: Option<usize>, variants: Option<Vec<Variant>>) -> Result<FactorialSpec> {
    let o = Overrides {
        preset: common.preset,
        seed: common.seed,
        threads: common.threads,
        steps,
        variants,
    };
    config::resolve(common.config.as_deref(), common.out.clone(), &o)
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn manifest_paths(out: &Path, m: &Manifest) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = m.files.iter().map(|f| out.join(&f.path)).collect();
    v.push(out.join(Manifest::FILE));
    v
}

fn log(msg: &str) {
    eprintln!("blns: {msg}");
}

fn cmd_train(spec: &FactorialSpec) -> Result<Vec<PathBuf>> {
    let corpus = spec.corpus.load(spec.plan.seed).context("loading corpus")?;
    let every = spec.plan.checkpoint_every;
    let records = experiment::train_variants(spec, &corpus, &|v, row| {
        if let Some(val) = row.val_loss.filter(|_| (row.step + 1) % every == 0) {
            log(&format!("{v} step {} train {:.4} val {val:.4}", row.step + 1, row.train_loss));
        }
    })?;
    let mut paths = Vec::new();
    for r in &records {
        log(&format!(
            "{}: {} parameters, final validation loss {}",
            r.variant,
            r.param_count,
            r.final_val_loss.map_or("n/a".into(), |v| format!("{v:.4}"))
        ));
        paths.push(r.checkpoint.clone());
        paths.push(r.loss_curve.clone());
    }
    paths.push(spec.checkpoint_dir().join("train.jsonl"));
    Ok(paths)
}

fn base_result(spec: &FactorialSpec) -> FactorialResult {
    FactorialResult {
        n_layers: spec.base.n_layers,
        variants: spec.variants.clone(),
        ..FactorialResult::default()
    }
}

fn cmd_hessian(spec: &FactorialSpec) -> Result<Vec<PathBuf>> {
    let states = load_variants(spec)?;
    let corpus = spec.corpus.load(spec.plan.seed)?;
    let mut r = base_result(spec);
    r.phase1 = run_phase1(spec, &corpus, &states)?;
    for c in &r.phase1 {
        if let Some(s) = &c.summary {
            log(&format!(
                "{} layer {}: erank {:.3} trace {:.4e}",
                c.variant, c.layer, s.effective_rank, s.trace
            ));
        }
    }
    Ok(vec![write_stage(spec, "phase1", &r)?])
}

fn cmd_steer(spec: &FactorialSpec) -> Result<Vec<PathBuf>> {
    let states = load_variants(spec)?;
    let corpus = spec.corpus.load(spec.plan.seed)?;
    let mut r = base_result(spec);
    let (cells, contexts, traces) = run_phase2(spec, &corpus, &states)?;
    r.phase2 = cells;
    r.contexts = contexts;
    let trace_path = spec.raw_dir().join("steering_traces.csv");
    write_atomic(&trace_path, traces.as_bytes())?;
    let p = write_stage(spec, "phase2", &r)?;
    Ok(vec![p, spec.raw_dir().join("phase2_contexts.jsonl"), trace_path])
}

fn cmd_tasks(spec: &FactorialSpec) -> Result<Vec<PathBuf>> {
    let states = load_variants(spec)?;
    let mut r = base_result(spec);
    (r.tasks, r.task_summaries) = run_task_sweep(spec, &states)?;
    for s in &r.task_summaries {
        log(&format!(
            "{} {}: best layer {} step {} effect {:.4e}{}",
            s.variant,
            s.task.name(),
            s.best_layer,
            s.best_epsilon,
            s.best_effect,
            if s.sign_consistent { "" } else { " (sign flips)" }
        ));
    }
    let p = write_stage(spec, "tasks", &r)?;
    Ok(vec![p, spec.raw_dir().join("task_summaries.jsonl")])
}

fn cmd_report(spec: &FactorialSpec) -> Result<Vec<PathBuf>> {
    let r = load_result(spec)?;
    let m = render_report(&r, &spec.out_dir)?;
    Ok(manifest_paths(&spec.out_dir, &m))
}

fn cmd_run_all(spec: &FactorialSpec) -> Result<Vec<PathBuf>> {
    let (_, m) = experiment::run_all(spec, &log)?;
    Ok(manifest_paths(&spec.out_dir, &m))
}

fn run(cli: Cli) -> Result<()> {
    let (stage, paths) = match &cli.command {
        Command::Train { variant, steps } => {
            let spec = spec_for(&cli.common, *steps, Some(variant.0.clone()))?;
            ("train", cmd_train(&spec))
        }
        Command::Hessian => ("hessian", spec_for(&cli.common, None, None).and_then(|s| cmd_hessian(&s))),
        Command::Steer => ("steer", spec_for(&cli.common, None, None).and_then(|s| cmd_steer(&s))),
        Command::Tasks => ("tasks", spec_for(&cli.common, None, None).and_then(|s| cmd_tasks(&s))),
        Command::Report => ("report", spec_for(&cli.common, None, None).and_then(|s| cmd_report(&s))),
        Command::RunAll { steps } => ("run-all", spec_for(&cli.common, *steps, None).and_then(|s| cmd_run_all(&s))),
        Command::Diagnose(args) => ("diagnose", diagnose::run(&cli.common, args).map(|()| Vec::new())),
    };
    let paths = paths.with_context(|| format!("stage '{stage}' failed"))?;
    print_paths(&paths);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

pub(crate) fn parse_readout(s: &str) -> std::result::Result<Readout, String> {
    if s == "final" {
        return Ok(Readout::Final);
    }
    s.parse::<usize>()
        .map(Readout::Layer)
        .map_err(|_| format!("layer must be a block index or 'final', got '{s}'"))
}
