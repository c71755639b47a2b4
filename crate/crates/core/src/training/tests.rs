use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{ModelConfig, StreamMode};

fn small_model(mode: StreamMode, aux: bool, ctx: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        vocab_size: BYTE_VOCAB,
        context_length: ctx,
        stream_mode: mode,
        aux_loss: aux,
        seed: 3,
        ..ModelConfig::default()
    }
}

#[test]
fn tokenize_examples() {
    assert_eq!(tokenize(b"AB"), vec![65, 66]);
    assert!(tokenize(b"").is_empty());
    assert!(detokenize(&[256]).is_err());
}

#[test]
fn tokenize_round_trips_random_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(0..64);
        let s: Vec<u8> = (0..n).map(|_| rng.random()).collect();
        assert_eq!(detokenize(&tokenize(&s)).unwrap(), s);
    }
}

proptest! {
    #[test]
    fn split_is_disjoint_and_covers(len in 10usize..5000, chunk in 8usize..300, seed in 0u64..50) {
        let bytes: Vec<u8> = (0..len).map(|i| (i % 251) as u8).collect();
        let c = Corpus::from_bytes(&bytes, seed, chunk).unwrap();
        let mut seen = vec![0u8; len];
        for s in c.train_spans().iter().chain(c.valid_spans()) {
            for i in s.clone() {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&k| k == 1));
        let again = Corpus::from_bytes(&bytes, seed, chunk).unwrap();
        prop_assert_eq!(c.valid_spans(), again.valid_spans());
    }
}

#[test]
fn batches_are_deterministic_and_shifted() {
    let bytes = synthetic::default_corpus(1, 200, 1);
    let c = Corpus::from_bytes(&bytes, 0, 256).unwrap();
    let plan = TrainPlan { steps: 10, batch_size: 4, ..TrainPlan::default() };
    let a = c.next_batch(&plan, 32, 3).unwrap();
    assert_eq!(a, c.next_batch(&plan, 32, 3).unwrap());
    for (x, y) in a.tokens.iter().zip(&a.targets) {
        assert_eq!(&x[1..], &y[..31]);
    }
    assert!(c.next_batch(&plan, 32, 10).is_err());
}

#[test]
fn different_steps_rarely_collide() {
    let bytes = synthetic::default_corpus(2, 600, 2);
    let c = Corpus::from_bytes(&bytes, 0, 1024).unwrap();
    let plan = TrainPlan { steps: 1001, batch_size: 1, ..TrainPlan::default() };
    let firsts: Vec<Vec<usize>> = (0..1000).map(|s| c.next_batch(&plan, 16, s).unwrap().tokens.remove(0)).collect();
    let distinct: HashSet<_> = firsts.iter().collect();
    // Windows are drawn from tens of thousands of offsets; birthday
    // collisions over 1000 draws should be a handful at most.
    let starts: usize = c.train_spans().iter().map(|s| s.len() - 16).sum();
    let expected_collisions = 1000.0 * 999.0 / 2.0 / starts as f64;
    let collisions = 1000 - distinct.len();
    assert!((collisions as f64) <= 3.0 * expected_collisions + 5.0, "{collisions} vs {expected_collisions}");
}

#[test]
fn short_corpus_is_rejected() {
    let c = Corpus::from_bytes(b"abcdef", 0, 4).unwrap();
    let plan = TrainPlan { steps: 1, batch_size: 1, ..TrainPlan::default() };
    assert!(matches!(c.next_batch(&plan, 16, 0), Err(Error::Validation(_))));
}

#[test]
fn held_out_pools_are_disjoint() {
    let bytes = synthetic::default_corpus(3, 600, 2);
    let c = Corpus::from_bytes(&bytes, 0, 512).unwrap();
    let a = c.held_out(HeldOut::Measurement);
    let b = c.held_out(HeldOut::Steering);
    assert!(!a.is_empty() && !b.is_empty());
    assert_eq!(a.len() + b.len(), c.valid_spans().len());
    for x in &a {
        assert!(b.iter().all(|y| x.end <= y.start || y.end <= x.start));
        assert!(c.train_spans().iter().all(|y| x.end <= y.start || y.end <= x.start));
    }
}

#[test]
fn schedule_warms_up_then_decays_to_floor() {
    let plan = TrainPlan { steps: 1000, warmup_steps: 100, learning_rate: 1e-3, ..TrainPlan::default() };
    assert!((plan.lr_at(0) - 1e-5).abs() < 1e-18);
    assert!((plan.lr_at(99) - 1e-3).abs() < 1e-15);
    assert!((plan.lr_at(100) - 1e-3).abs() < 1e-15);
    assert!((plan.lr_at(1000) - 1e-4).abs() < 1e-15);
    assert!(plan.lr_at(550) < plan.lr_at(300));
}

#[test]
fn zero_gradient_step_changes_nothing() {
    let mut s = ModelState::init(&small_model(StreamMode::Single, false, 8)).unwrap();
    let before = s.clone();
    let zeros: Vec<Tensor> = s.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut adam = Adam::new(&s);
    adam.step(&mut s, &zeros, 1e-3);
    assert_eq!(s, before);
}

#[test]
fn clipping_bounds_global_norm() {
    let mut g = vec![Tensor::filled(&[4], 3.0), Tensor::filled(&[2, 2], 4.0)];
    let before = clip_grad_norm(&mut g, 1.0);
    assert!((before - 10.0).abs() < 1e-12);
    let after: f64 = g.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
    assert!((after - 1.0).abs() < 1e-12);
}

#[test]
fn zero_steps_leave_state_unchanged() {
    let s = ModelState::init(&small_model(StreamMode::Cascade, true, 8)).unwrap();
    let c = Corpus::from_bytes(&synthetic::default_corpus(0, 50, 1), 0, 256).unwrap();
    let plan = TrainPlan { steps: 0, ..TrainPlan::default() };
    let out = train(s.clone(), &c, &plan, |_| {}).unwrap();
    assert_eq!(out.state, s);
    assert!(out.curve.is_empty());
}

#[test]
fn learns_a_repeating_pattern() {
    let bytes = b"abc".repeat(2000);
    let c = Corpus::from_bytes(&bytes, 0, 256).unwrap();
    let plan = TrainPlan {
        steps: 200,
        batch_size: 8,
        learning_rate: 3e-3,
        warmup_steps: 20,
        checkpoint_every: 100,
        ..TrainPlan::default()
    };
    let s = ModelState::init(&small_model(StreamMode::Single, false, 16)).unwrap();
    let out = train(s, &c, &plan, |_| {}).unwrap();
    let v = out.final_val_loss().unwrap();
    assert!(v < 0.5, "validation loss {v}");
    assert_eq!(out.curve.len(), 200);
    assert!(out.state.all_finite());
}

#[test]
fn training_is_bit_reproducible_and_fair() {
    let c = Corpus::from_bytes(&synthetic::default_corpus(0, 100, 1), 0, 256).unwrap();
    let plan = TrainPlan { steps: 6, batch_size: 2, checkpoint_every: 3, ..TrainPlan::default() };
    let run = |mode, aux| {
        let s = ModelState::init(&small_model(mode, aux, 16)).unwrap();
        train(s, &c, &plan, |_| {}).unwrap()
    };
    let a = run(StreamMode::Cascade, true);
    let b = run(StreamMode::Cascade, true);
    assert_eq!(crate::model::to_bytes(&a.state), crate::model::to_bytes(&b.state));
    let d = run(StreamMode::Single, false);
    assert_eq!(a.data_digest, d.data_digest);
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let c = Corpus::from_bytes(&synthetic::default_corpus(0, 100, 1), 0, 256).unwrap();
    let mut s = ModelState::init(&small_model(StreamMode::Single, false, 8)).unwrap();
    s.head_ln_g.data_mut()[0] = f64::NAN;
    let plan = TrainPlan { steps: 3, batch_size: 2, ..TrainPlan::default() };
    match train(s, &c, &plan, |_| {}) {
        Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected non-finite loss, got {other:?}"),
    }
}

#[test]
fn loss_csv_has_header_and_rows() {
    let rows = vec![
        LossRow { step: 0, train_loss: 5.5, val_loss: None },
        LossRow { step: 1, train_loss: 5.0, val_loss: Some(4.9) },
    ];
    let csv = loss_curve_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,train_loss,val_loss");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].ends_with(','));
}
