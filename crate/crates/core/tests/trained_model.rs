//! End-to-end use of the public API on a briefly trained toy model: train,
//! checkpoint, read out representations, measure the Hessian and steer.

use bregman_lens::experiment::{concept_spec, CorpusSpec};
use bregman_lens::geometry::{effective_rank, hessian, summarize, Readout};
use bregman_lens::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelState, Variant};
use bregman_lens::numerics::eigh;
use bregman_lens::steering::{
    build_concept, cosine_diagnostic, run_steering, target_probability, DualImage, Method, RepresentationSource,
    SteeringOptions,
};
use bregman_lens::training::{train, Corpus, HeldOut, TrainPlan};

fn toy_corpus() -> Corpus {
    let spec = CorpusSpec {
        synthetic_lines_per_task: 300,
        prose_repeats: 1,
        ..CorpusSpec::default()
    };
    spec.load(3).unwrap()
}

fn trained(variant: Variant, corpus: &Corpus) -> ModelState {
    let base = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        context_length: 32,
        seed: 3,
        ..ModelConfig::default()
    };
    let plan = TrainPlan {
        steps: 40,
        batch_size: 8,
        learning_rate: 3e-3,
        warmup_steps: 5,
        checkpoint_every: 20,
        val_batches: 2,
        seed: 3,
        ..TrainPlan::default()
    };
    let out = train(ModelState::init(&variant.configure(&base)).unwrap(), corpus, &plan, |_| {}).unwrap();
    let first = out.curve.first().unwrap().train_loss;
    let last = out.curve.last().unwrap().train_loss;
    assert!(last < first, "{variant}: loss went from {first} to {last}");
    out.state
}

#[test]
fn checkpoint_round_trip_preserves_forward_pass() {
    let corpus = toy_corpus();
    let state = trained(Variant::CascadeAux, &corpus);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.blns");
    save_checkpoint(&state, &path).unwrap();
    let back = load_checkpoint(&path, Some(state.config())).unwrap();
    let tokens: Vec<usize> = b"The cat sat".iter().map(|&b| b as usize).collect();
    let a = state.forward(&tokens).unwrap();
    let b = back.forward(&tokens).unwrap();
    assert_eq!(a.final_logits().data(), b.final_logits().data());
}

#[test]
fn readout_hessians_are_psd_with_bounded_rank() {
    let corpus = toy_corpus();
    let state = trained(Variant::SingleControl, &corpus);
    let family = state.family();
    let windows = corpus.held_out_windows(HeldOut::Measurement, 4, 24, 9).unwrap();
    for (w, _) in &windows {
        let rec = state.forward(w).unwrap();
        for readout in [Readout::Layer(0), Readout::Layer(1), Readout::Final] {
            let repr = rec.representation_at(readout, w.len() - 1).unwrap();
            let h = hessian(&family, &repr, family.vocab()).unwrap();
            let eig = eigh(&h.matrix).unwrap().eigenvalues;
            let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
            assert!(min >= -1e-10 * h.trace(), "{readout}: λ_min {min}");
            let s = summarize(&h).unwrap();
            let er = effective_rank(&s.eigenvalues).value;
            assert!(er >= 1.0 - 1e-9 && er <= family.dim() as f64 + 1e-9, "{readout}: erank {er}");
        }
    }
}

#[test]
fn final_readout_matches_last_layer() {
    let corpus = toy_corpus();
    let state = trained(Variant::SingleAux, &corpus);
    let tokens: Vec<usize> = b"once upon a time".iter().map(|&b| b as usize).collect();
    let rec = state.forward(&tokens).unwrap();
    let last = tokens.len() - 1;
    assert_eq!(
        rec.representation_at(Readout::Final, last).unwrap().lambda,
        rec.representation_at(Readout::Layer(1), last).unwrap().lambda
    );
}

#[test]
fn steering_a_trained_model_raises_the_concept_probability() {
    let corpus = toy_corpus();
    let state = trained(Variant::CascadeControl, &corpus);
    let spec = concept_spec("capitalization", &corpus, 16, 8, 11).unwrap();
    let concept = build_concept(&state, &spec, Readout::Final).unwrap();
    let family = state.family();
    let (w, _) = corpus.held_out_windows(HeldOut::Steering, 1, 24, 5).unwrap().remove(0);
    let start = state
        .last_token_representations(&[w], Readout::Final)
        .unwrap()
        .remove(0)
        .lambda;

    let cos = cosine_diagnostic(&family, &start, &concept.v, DualImage::Hessian).unwrap();
    assert!((-1.0..=1.0).contains(&cos.value));

    let p0 = target_probability(&family, &start, &concept.target).unwrap();
    let opts = SteeringOptions {
        max_steps: 300,
        ..SteeringOptions::default()
    };
    for method in [Method::Euclidean, Method::Dual] {
        let trace = run_steering(&family, &start, &concept, method, 0.2, &opts).unwrap();
        let best = trace.records.iter().map(|r| r.p_target).fold(0.0, f64::max);
        assert!(best > p0, "{method:?}: p(T) never rose above {p0}");
        if let Some(kl) = trace.kl_at_stop() {
            assert!(kl.is_finite() && kl >= -1e-12, "{method:?}: KL {kl}");
        }
    }
}
