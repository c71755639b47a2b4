use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use bregman_lens::experiment::concept_spec;
use bregman_lens::geometry::{Readout, SoftmaxFamily};
use bregman_lens::model::{load_checkpoint, Variant};
use bregman_lens::numerics::Tensor;
use bregman_lens::steering::{build_concept, cosine_diagnostic, verdict, DualImage, RepresentationSource};
use bregman_lens::training::{tokenize, HeldOut};
use clap::{Args, ValueEnum};

use crate::{parse_readout, spec_for, Common};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Synthetic {
    /// `±e_i` embeddings at `λ = 0`: `H = I/d`, so `Hv ∥ v`.
    Isotropic,
    /// Embeddings with no component along the concept axis: `Hv = 0`.
    Crushed,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    /// Checkpoint to inspect [default: <out>/checkpoints/<variant>.blns]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Variant whose checkpoint to use when --checkpoint is not given
    #[arg(long, default_value = "single_control")]
    variant: Variant,
    /// Block index or `final`
    #[arg(long, default_value = "final", value_parser = parse_readout)]
    layer: Readout,
    /// Concept name
    #[arg(long, default_value = "capitalization")]
    concept: String,
    /// Text whose last position supplies λ [default: a held-out steering window]
    #[arg(long)]
    context: Option<String>,
    /// Skip the model and use a synthetic family instead
    #[arg(long, value_enum)]
    synthetic: Option<Synthetic>,
    /// Embedding dimension of the synthetic family
    #[arg(long, default_value_t = 8)]
    dim: usize,
}

pub fn synthetic_case(kind: Synthetic, d: usize) -> Result<(SoftmaxFamily, Vec<f64>, Vec<f64>)> {
    if d < 2 {
        bail!("--dim must be at least 2");
    }
    let mut data = vec![0.0; 2 * d * d];
    let used = match kind {
        Synthetic::Isotropic => d,
        Synthetic::Crushed => d - 1,
    };
    for i in 0..used {
        data[2 * i * d + i] = 1.0;
        data[(2 * i + 1) * d + i] = -1.0;
    }
    if kind == Synthetic::Crushed {
        // The last two tokens duplicate the first pair, keeping γ_y,d = 0.
        data[2 * used * d] = 1.0;
        data[(2 * used + 1) * d] = -1.0;
    }
    let family = SoftmaxFamily::from_tensor(Tensor::matrix(2 * d, d, data)?)?;
    let mut v = vec![0.0; d];
    match kind {
        Synthetic::Isotropic => v[0] = 1.0,
        Synthetic::Crushed => v[d - 1] = 1.0,
    }
    Ok((family, vec![0.0; d], v))
}

pub fn run(common: &Common, args: &DiagnoseArgs) -> Result<()> {
    let (family, lambda, v, what) = match args.synthetic {
        Some(kind) => {
            let (f, l, v) = synthetic_case(kind, args.dim)?;
            (f, l, v, format!("synthetic {kind:?} family, d = {}", args.dim).to_lowercase())
        }
        None => {
            let spec = spec_for(common, None, None)?;
            let path = args.checkpoint.clone().unwrap_or_else(|| spec.checkpoint_path(args.variant));
            let state = load_checkpoint(&path, None)?;
            let ctx = state.config().context_length;
            let corpus = spec.corpus.load(spec.plan.seed).context("loading corpus")?;
            let len = spec.phase2.context_length.unwrap_or(ctx).min(ctx);
            let cspec = concept_spec(&args.concept, &corpus, len, spec.phase2.prompts_per_pole, spec.plan.seed)?;
            let concept = build_concept(&state, &cspec, args.layer)?;
            let prompt = match &args.context {
                Some(text) => {
                    let t = tokenize(text.as_bytes());
                    if t.is_empty() {
                        bail!("--context is empty");
                    }
                    t[t.len().saturating_sub(ctx)..].to_vec()
                }
                None => corpus.held_out_windows(HeldOut::Steering, 1, len, spec.plan.seed)?.remove(0).0,
            };
            let rep = state.last_token_representations(&[prompt], args.layer)?.remove(0);
            let what = format!("{} layer {}, concept '{}'", path.display(), args.layer, args.concept);
            (state.family(), rep.lambda, concept.v, what)
        }
    };
    let cos = cosine_diagnostic(&family, &lambda, &v, DualImage::Hessian)?;
    println!("{what}");
    println!("cosine {:.6}", cos.value);
    if cos.degenerate {
        println!("Hv vanishes: the concept direction is crushed by the head");
    }
    println!("verdict {}", verdict(cos.value));
    Ok(())
}
