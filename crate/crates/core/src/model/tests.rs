use super::*;
use crate::geometry::Readout;
use crate::numerics::Tensor;

fn tiny(mode: StreamMode, aux: bool) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        vocab_size: 32,
        context_length: 8,
        stream_mode: mode,
        aux_loss: aux,
        aux_lambda: DEFAULT_AUX_LAMBDA,
        aux_schedule: AuxSchedule::Proportional,
        seed: 7,
    }
}

fn batch(v: usize, n_seq: usize, t: usize, salt: usize) -> Batch {
    let tokens: Vec<Vec<usize>> = (0..n_seq)
        .map(|s| (0..t).map(|i| (i * 7 + s * 13 + salt * 3 + 1) % v).collect())
        .collect();
    let targets = tokens
        .iter()
        .map(|seq| seq.iter().map(|&x| (x * 5 + 2) % v).collect())
        .collect();
    Batch::new(tokens, targets).unwrap()
}

#[test]
fn validate_lists_every_violated_bound() {
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 10,
        n_heads: 3,
        vocab_size: 1,
        ..ModelConfig::default()
    };
    let msg = cfg.validate().unwrap_err().to_string();
    assert!(msg.contains("n_layers"), "{msg}");
    assert!(msg.contains("vocab_size"), "{msg}");
    assert!(msg.contains("divisible"), "{msg}");
    assert!(ModelState::init(&cfg).is_err());
}

#[test]
fn proportional_weights_for_six_layers() {
    let cfg = ModelConfig {
        n_layers: 6,
        aux_loss: true,
        ..ModelConfig::default()
    };
    let w = cfg.layer_weights();
    let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0, 4.0 / 6.0, 5.0 / 6.0];
    assert_eq!(w.len(), 5);
    for (a, b) in w.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    let c = cfg.aux_coefficients();
    for (a, b) in c.iter().zip(want) {
        assert!((a - 0.1 * b).abs() < 1e-15);
    }
}

#[test]
fn ramp_schedule_spans_point_one_to_point_eight() {
    let cfg = ModelConfig {
        n_layers: 6,
        aux_loss: true,
        aux_schedule: AuxSchedule::Ramp,
        ..ModelConfig::default()
    };
    let c = cfg.aux_coefficients();
    assert!((c[0] - 0.1).abs() < 1e-15);
    assert!((c[4] - 0.8).abs() < 1e-15);
    assert!(c.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn init_is_seeded() {
    let cfg = tiny(StreamMode::Single, false);
    let a = ModelState::init(&cfg).unwrap();
    let b = ModelState::init(&cfg).unwrap();
    assert_eq!(a, b);
    let c = ModelState::init(&ModelConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(a.wte, c.wte);
}

#[test]
fn all_variants_share_parameter_count_and_values() {
    let base = ModelConfig::default();
    let states: Vec<_> = Variant::ALL
        .iter()
        .map(|v| ModelState::init(&v.configure(&base)).unwrap())
        .collect();
    let n = states[0].param_count();
    assert!(n > 100_000);
    for s in &states {
        assert_eq!(s.param_count(), n);
        assert_eq!(s.params(), states[0].params());
    }
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        assert_eq!(ModelState::init(&v.configure(&tiny(StreamMode::Single, false))).unwrap().model_id(), v.name());
    }
    let err = "both".parse::<Variant>().unwrap_err().to_string();
    assert!(err.contains("cascade_aux"));
}

#[test]
fn cascade_token_stream_is_the_embedding_row() {
    let s = ModelState::init(&tiny(StreamMode::Cascade, true)).unwrap();
    let tokens = [3, 9, 1, 30, 5];
    let rec = s.forward(&tokens).unwrap();
    let xt = rec.token_stream.as_ref().unwrap();
    for (i, &t) in tokens.iter().enumerate() {
        assert_eq!(xt.row(i), s.wte.row(t));
    }
    for l in 0..rec.n_layers() {
        let sum = xt.add(&rec.contextual[l]).unwrap();
        assert_eq!(sum, rec.combined[l]);
    }
}

#[test]
fn single_mode_has_no_token_stream() {
    let s = ModelState::init(&tiny(StreamMode::Single, false)).unwrap();
    let rec = s.forward(&[1, 2, 3]).unwrap();
    assert!(rec.token_stream.is_none());
    assert!(rec.contextual.is_empty());
    assert_eq!(rec.combined.len(), 2);
}

#[test]
fn logit_lens_matches_recomputation_bit_exactly() {
    for mode in [StreamMode::Single, StreamMode::Cascade] {
        let s = ModelState::init(&tiny(mode, false)).unwrap();
        let tokens = [4, 8, 15, 16, 23, 31];
        let rec = s.forward(&tokens).unwrap();
        let fam = s.family();
        for l in 0..rec.n_layers() {
            for p in 0..tokens.len() {
                let lam = rec.representation_at(Readout::Layer(l), p).unwrap();
                assert_eq!(lam.dim(), 16);
                assert_eq!(fam.logits(&lam.lambda).unwrap(), rec.logits[l].row(p));
            }
        }
        let x0 = rec.combined[0].row(2).to_vec();
        let normed = crate::numerics::layer_norm(&x0, s.head_ln_g.data(), s.head_ln_b.data()).unwrap();
        let z = fam.logits(&normed).unwrap();
        for (a, b) in z.iter().zip(rec.logits[0].row(2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn final_readout_is_last_layer() {
    let s = ModelState::init(&tiny(StreamMode::Single, false)).unwrap();
    let rec = s.forward(&[1, 2, 3]).unwrap();
    let a = rec.representation_at(Readout::Final, 2).unwrap();
    let b = rec.representation_at(Readout::Layer(1), 2).unwrap();
    assert_eq!(a.lambda, b.lambda);
    assert!(matches!(
        rec.representation_at(Readout::Layer(2), 0),
        Err(crate::Error::Contract(_))
    ));
    assert!(matches!(rec.representation_at(Readout::Layer(0), 3), Err(crate::Error::Contract(_))));
}

#[test]
fn forward_is_causal() {
    for mode in [StreamMode::Single, StreamMode::Cascade] {
        let s = ModelState::init(&tiny(mode, true)).unwrap();
        let a = s.forward(&[1, 2, 3, 4, 5, 6]).unwrap();
        let b = s.forward(&[1, 2, 3, 9, 5, 6]).unwrap();
        for l in 0..2 {
            for p in 0..3 {
                assert_eq!(a.logits[l].row(p), b.logits[l].row(p));
            }
            assert_ne!(a.logits[l].row(3), b.logits[l].row(3));
        }
        // Truncation at a position leaves its representation unchanged.
        let c = s.forward(&[1, 2, 3]).unwrap();
        assert_eq!(
            a.representation_at(Readout::Layer(1), 2).unwrap().lambda,
            c.representation_at(Readout::Layer(1), 2).unwrap().lambda
        );
    }
}

#[test]
fn batch_order_does_not_change_per_sequence_outputs() {
    let s = ModelState::init(&tiny(StreamMode::Cascade, false)).unwrap();
    let seqs = vec![vec![1, 2, 3, 4], vec![9, 8, 7, 6], vec![0, 31, 0, 31]];
    let fwd = s.forward_batch(&seqs).unwrap();
    let rev: Vec<_> = seqs.iter().rev().cloned().collect();
    let bwd = s.forward_batch(&rev).unwrap();
    for si in 0..3 {
        for p in 0..4 {
            let r1 = fwd.representation_in(Readout::Final, si, p).unwrap();
            let r2 = bwd.representation_in(Readout::Final, 2 - si, p).unwrap();
            assert_eq!(r1.lambda, r2.lambda);
        }
    }
}

#[test]
fn invalid_tokens_are_rejected() {
    let s = ModelState::init(&tiny(StreamMode::Single, false)).unwrap();
    assert!(matches!(s.forward(&[1, 32]), Err(crate::Error::Validation(_))));
    assert!(matches!(s.forward(&[0; 9]), Err(crate::Error::Validation(_))));
    assert!(s.forward(&[]).is_err());
}

#[test]
fn single_position_attends_to_itself() {
    let s = ModelState::init(&tiny(StreamMode::Single, false)).unwrap();
    let x = Tensor::matrix(1, 16, (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let out = s.attention_sublayer(0, &x, 1, false).unwrap();
    // With one position the softmax weight is 1, so the output is v·W_out + b_out.
    let lp = &s.layers[0];
    let h = crate::numerics::layer_norm(x.row(0), lp.ln1_g.data(), lp.ln1_b.data()).unwrap();
    let qkv = lp.w_qkv.transpose().unwrap().matvec(&h).unwrap();
    let v = &qkv[32..48];
    let want = lp.w_out.transpose().unwrap().matvec(v).unwrap();
    for (a, b) in out.row(0).iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn saturated_gate_matches_ungated_attention() {
    let mut s = ModelState::init(&tiny(StreamMode::Single, false)).unwrap();
    s.layers[0].w_gate = Tensor::zeros(&[16, 16]);
    s.layers[0].b_gate = Tensor::filled(&[16], 20.0);
    let x = Tensor::matrix(5, 16, (0..80).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
    let gated = s.attention_sublayer(0, &x, 1, true).unwrap();
    let plain = s.attention_sublayer(0, &x, 1, false).unwrap();
    assert!(gated.sub(&plain).unwrap().max_abs() < 1e-6);
}

#[test]
fn default_gate_starts_mostly_open() {
    let s = ModelState::init(&tiny(StreamMode::Single, false)).unwrap();
    let x = Tensor::matrix(5, 16, (0..80).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
    let gated = s.attention_sublayer(0, &x, 1, true).unwrap();
    let plain = s.attention_sublayer(0, &x, 1, false).unwrap();
    let rel = gated.sub(&plain).unwrap().frobenius_norm() / plain.frobenius_norm();
    assert!(rel < 0.1, "relative gap {rel}");
}

#[test]
fn control_loss_is_final_cross_entropy() {
    let s = ModelState::init(&tiny(StreamMode::Single, false)).unwrap();
    let b = batch(32, 3, 6, 0);
    let br = s.evaluate(&b).unwrap();
    assert_eq!(br.total, br.final_ce);
    assert!(br.aux_ce.iter().all(Option::is_none));
}

#[test]
fn aux_loss_adds_weighted_intermediate_terms() {
    let s = ModelState::init(&tiny(StreamMode::Cascade, true)).unwrap();
    let b = batch(32, 2, 5, 1);
    let br = s.evaluate(&b).unwrap();
    let ce0 = br.aux_ce[0].unwrap();
    assert!((br.total - (br.final_ce + 0.1 * 0.5 * ce0)).abs() < 1e-12);
}

#[test]
fn zero_lambda_makes_objectives_coincide() {
    let aux = ModelConfig {
        aux_lambda: 0.0,
        ..tiny(StreamMode::Cascade, true)
    };
    let s_aux = ModelState::init(&aux).unwrap();
    let s_ctl = s_aux
        .clone()
        .with_config(tiny(StreamMode::Cascade, false))
        .unwrap();
    let b = batch(32, 2, 7, 2);
    assert_eq!(s_aux.composite_loss(&b).unwrap(), s_ctl.composite_loss(&b).unwrap());
}

#[test]
fn untrained_loss_is_near_log_vocab() {
    let s = ModelState::init(&ModelConfig {
        context_length: 32,
        ..ModelConfig::default()
    })
    .unwrap();
    let b = batch(256, 4, 32, 3);
    let ce = s.evaluate(&b).unwrap().final_ce;
    let lnv = (256f64).ln();
    assert!((ce - lnv).abs() < 0.1 * lnv, "ce {ce}");
}

#[test]
fn empty_batch_is_a_contract_error() {
    assert!(matches!(Batch::new(vec![], vec![]), Err(crate::Error::Contract(_))));
}

#[test]
fn batch_fingerprint_tracks_content() {
    let a = batch(32, 2, 4, 0);
    assert_eq!(a.fingerprint(), batch(32, 2, 4, 0).fingerprint());
    assert_ne!(a.fingerprint(), batch(32, 2, 4, 1).fingerprint());
}

/// Central differences on every parameter of a 2-layer, d=16, V=32 model.
fn check_gradients(cfg: ModelConfig) {
    let mut s = ModelState::init(&cfg).unwrap();
    // Larger weights than the init so every path carries signal.
    for p in s.params_mut() {
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            *x += 0.05 * ((i as f64) * 0.7311).sin();
        }
    }
    let b = batch(32, 2, 5, 4);
    let (_, grads) = s.loss_and_grads(&b).unwrap();
    let h = 1e-5;
    let n_params = s.params().len();
    let mut worst: f64 = 0.0;
    for pi in 0..n_params {
        let len = s.params()[pi].len();
        // Probe a spread of entries of every block.
        let stride = (len / 6).max(1);
        for ei in (0..len).step_by(stride) {
            let orig = s.params()[pi].data()[ei];
            s.params_mut()[pi].data_mut()[ei] = orig + h;
            let up = s.composite_loss(&b).unwrap();
            s.params_mut()[pi].data_mut()[ei] = orig - h;
            let dn = s.composite_loss(&b).unwrap();
            s.params_mut()[pi].data_mut()[ei] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = grads[pi].data()[ei];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            worst = worst.max(err);
            assert!(err < 1e-4, "param {pi} entry {ei}: fd {fd} vs analytic {an}");
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn gradients_match_finite_differences_single_aux() {
    check_gradients(tiny(StreamMode::Single, true));
}

#[test]
fn gradients_match_finite_differences_cascade_aux() {
    check_gradients(tiny(StreamMode::Cascade, true));
}

#[test]
fn gradients_match_finite_differences_cascade_control() {
    check_gradients(tiny(StreamMode::Cascade, false));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let s = ModelState::init(&tiny(StreamMode::Cascade, true)).unwrap();
    let bytes = to_bytes(&s);
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    let back = from_bytes(&bytes, "mem", Some(s.config())).unwrap();
    assert_eq!(back, s);
    for (a, b) in back.params().iter().zip(s.params()) {
        let ab: Vec<u64> = a.data().iter().map(|x| x.to_bits()).collect();
        let bb: Vec<u64> = b.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(ab, bb);
    }
}

#[test]
fn checkpoint_rejects_damage_and_mismatch() {
    let s = ModelState::init(&tiny(StreamMode::Single, false)).unwrap();
    let bytes = to_bytes(&s);
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(
            from_bytes(&bytes[..cut], "t", None),
            Err(crate::Error::Corruption { .. })
        ));
    }
    let mut flipped = bytes.clone();
    flipped[100] ^= 1;
    assert!(matches!(from_bytes(&flipped, "t", None), Err(crate::Error::Corruption { .. })));
    let other = tiny(StreamMode::Cascade, false);
    assert!(matches!(
        from_bytes(&bytes, "t", Some(&other)),
        Err(crate::Error::Validation(_))
    ));
}

#[test]
fn checkpoint_rejects_other_versions() {
    use sha2::{Digest, Sha256};
    let s = ModelState::init(&tiny(StreamMode::Single, false)).unwrap();
    let mut bytes = to_bytes(&s);
    bytes.truncate(bytes.len() - 32);
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    let digest = Sha256::digest(&bytes);
    bytes.extend(digest);
    let err = from_bytes(&bytes, "t", None).unwrap_err().to_string();
    assert!(err.contains("version 2"), "{err}");
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.blns");
    let s = ModelState::init(&tiny(StreamMode::Single, true)).unwrap();
    save_checkpoint(&s, &path).unwrap();
    assert_eq!(load_checkpoint(&path, None).unwrap(), s);
    assert!(matches!(
        load_checkpoint(&dir.path().join("nope"), None),
        Err(crate::Error::MissingArtifact(_))
    ));
}
