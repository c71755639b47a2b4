use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_family(rng: &mut ChaCha8Rng, v: usize, d: usize) -> SoftmaxFamily {
    let data = (0..v * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    SoftmaxFamily::from_tensor(Tensor::matrix(v, d, data).unwrap()).unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-scale..scale)).collect()
}

fn one_d_family() -> SoftmaxFamily {
    SoftmaxFamily::from_tensor(Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap()).unwrap()
}

fn one_hot_family(v: usize) -> SoftmaxFamily {
    SoftmaxFamily::from_tensor(Tensor::identity(v)).unwrap()
}

/// Central-difference Hessian of `A`, independent of `hessian_matrix`.
fn fd_hessian(f: &SoftmaxFamily, lambda: &[f64], h: f64) -> Tensor {
    let d = lambda.len();
    let a = |x: &[f64]| log_normalizer(f, x).unwrap();
    let mut out = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..d {
            let shifted = |si: f64, sj: f64| {
                let mut x = lambda.to_vec();
                x[i] += si * h;
                x[j] += sj * h;
                a(&x)
            };
            let v = (shifted(1., 1.) - shifted(1., -1.) - shifted(-1., 1.) + shifted(-1., -1.))
                / (4.0 * h * h);
            out.set(i, j, v);
        }
    }
    out
}

fn fd_gradient(f: &SoftmaxFamily, lambda: &[f64], h: f64) -> Vec<f64> {
    (0..lambda.len())
        .map(|i| {
            let mut p = lambda.to_vec();
            let mut m = lambda.to_vec();
            p[i] += h;
            m[i] -= h;
            (log_normalizer(f, &p).unwrap() - log_normalizer(f, &m).unwrap()) / (2.0 * h)
        })
        .collect()
}

fn rel_frobenius(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
}

#[test]
fn log_normalizer_examples() {
    let zero = SoftmaxFamily::from_tensor(Tensor::zeros(&[7, 3])).unwrap();
    let a = log_normalizer(&zero, &[0.3, -2.0, 5.0]).unwrap();
    assert!((a - 7f64.ln()).abs() < 1e-14);

    let f = one_d_family();
    assert!((log_normalizer(&f, &[0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
    let want = (std::f64::consts::E + (-1f64).exp()).ln();
    assert!((log_normalizer(&f, &[1.0]).unwrap() - want).abs() < 1e-14);
    assert!((want - 1.126928).abs() < 1e-6);
}

#[test]
fn dimension_mismatch_is_reported() {
    let f = one_d_family();
    assert!(matches!(log_normalizer(&f, &[0.0, 1.0]), Err(Error::Dimension(_))));
    assert!(matches!(dual_coords(&f, &[]), Err(Error::Dimension(_))));
}

#[test]
fn dual_coords_examples() {
    let f = one_hot_family(5);
    let eta = dual_coords(&f, &[0.0; 5]).unwrap();
    assert!(eta.iter().all(|&e| (e - 0.2).abs() < 1e-15));

    // Logit gap 50 on token 0.
    let mut lambda = vec![0.0; 5];
    lambda[0] = 50.0;
    let eta = dual_coords(&f, &lambda).unwrap();
    for (e, g) in eta.iter().zip(f.gamma(0)) {
        assert!((e - g).abs() < 1e-6);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = random_family(&mut rng, 8, 3);
    let lambda = random_vec(&mut rng, 3, 2.0);
    let eta = dual_coords(&f, &lambda).unwrap();
    // Oracle: explicit exp / partition-sum loop.
    let logits: Vec<f64> = (0..8)
        .map(|y| f.gamma(y).iter().zip(&lambda).map(|(g, l)| g * l).sum())
        .collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let mut want = [0.0; 3];
    for y in 0..8 {
        for k in 0..3 {
            want[k] += logits[y].exp() / z * f.gamma(y)[k];
        }
    }
    for k in 0..3 {
        assert!((eta[k] - want[k]).abs() < 1e-12);
    }
}

#[test]
fn hessian_uniform_closed_form() {
    let v = 6;
    let f = one_hot_family(v);
    let h = hessian_matrix(&f, &vec![0.0; v], v).unwrap();
    let vf = v as f64;
    for i in 0..v {
        for j in 0..v {
            let want = if i == j { 1.0 / vf } else { 0.0 } - 1.0 / (vf * vf);
            assert!((h.get(i, j) - want).abs() < 1e-15);
        }
    }
    assert!((h.trace() - (vf - 1.0) / vf).abs() < 1e-14);
}

#[test]
fn hessian_point_mass_is_zero() {
    let f = one_hot_family(4);
    let h = hessian_matrix(&f, &[50.0, 0.0, 0.0, 0.0], 4).unwrap();
    assert!(h.trace() < 1e-20, "trace {}", h.trace());
}

#[test]
fn hessian_matches_finite_differences_random() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = random_family(&mut rng, 16, 4);
    let lambda = random_vec(&mut rng, 4, 1.0);
    let h = hessian_matrix(&f, &lambda, 16).unwrap();
    let fd = fd_hessian(&f, &lambda, 1e-4);
    assert!(rel_frobenius(&h, &fd) < 1e-4);
}

#[test]
fn top_k_below_two_is_a_contract_error() {
    let f = one_hot_family(4);
    assert!(matches!(hessian_matrix(&f, &[0.0; 4], 1), Err(Error::Contract(_))));
}

#[test]
fn top_k_renormalizes_over_the_most_probable_tokens() {
    let f = one_hot_family(4);
    let lambda = [2.0, 1.0, 0.0, -1.0];
    let h = hessian_matrix(&f, &lambda, 2).unwrap();
    // Two-atom covariance on tokens {0, 1}.
    let p0 = 1.0 / (1.0 + (-1f64).exp());
    let var = p0 * (1.0 - p0);
    assert!((h.get(0, 0) - var).abs() < 1e-15);
    assert!((h.get(0, 1) + var).abs() < 1e-15);
    assert_eq!(h.get(2, 2), 0.0);
    assert_eq!(top_k_indices(&[0.1, 0.4, 0.4, 0.1], 2), vec![1, 2]);
    assert_eq!(top_k_indices(&[0.25; 4], 2), vec![0, 1]);
}

#[test]
fn aggregate_examples() {
    let est = |m: Tensor| HessianEstimate {
        matrix: m,
        n_contexts: 1,
        top_k: 2,
        layer: Readout::Layer(1),
        model_id: "m".into(),
    };
    let a = est(Tensor::diag(&[1.0, 0.0]));
    let b = est(Tensor::diag(&[0.0, 1.0]));
    assert_eq!(aggregate_hessian(&[a.clone()]).unwrap(), a);
    let twice = aggregate_hessian(&[a.clone(), a.clone()]).unwrap();
    assert_eq!(twice.matrix, a.matrix);
    assert_eq!(twice.n_contexts, 2);
    let mean = aggregate_hessian(&[a.clone(), b]).unwrap();
    assert_eq!(mean.matrix, Tensor::diag(&[0.5, 0.5]));

    assert!(matches!(aggregate_hessian(&[]), Err(Error::Contract(_))));
    let mut other = a.clone();
    other.layer = Readout::Final;
    assert!(matches!(aggregate_hessian(&[a, other]), Err(Error::Validation(_))));
}

#[test]
fn aggregation_is_order_stable_to_1e12() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = random_family(&mut rng, 12, 4);
    let mut ests: Vec<HessianEstimate> = (0..40)
        .map(|_| {
            let r = Representation::new(random_vec(&mut rng, 4, 2.0), Readout::Layer(0), "m").unwrap();
            hessian(&f, &r, 12).unwrap()
        })
        .collect();
    let a = aggregate_hessian(&ests).unwrap();
    ests.reverse();
    let b = aggregate_hessian(&ests).unwrap();
    assert!(a.matrix.sub(&b.matrix).unwrap().max_abs() < 1e-12);
}

#[test]
fn effective_rank_examples() {
    assert!((effective_rank(&[1.0; 4]).value - 4.0).abs() < 1e-12);
    assert!((effective_rank(&[1.0, 0.0, 0.0, 0.0]).value - 1.0).abs() < 1e-15);
    let e = effective_rank(&[0.5, 0.25, 0.25]).value;
    assert!((e - 2f64.sqrt() * 2.0).abs() < 1e-12, "{e}");
    let z = effective_rank(&[0.0, -1e-18, 0.0]);
    assert!(z.trace_collapse && z.value == 0.0);
}

#[test]
fn condition_number_examples() {
    assert_eq!(condition_number(&[5.0, 5.0, 5.0]).kappa(), Some(1.0));
    assert_eq!(
        condition_number(&[10.0, 1e-20]),
        ConditionNumber::Defined {
            kappa: 1.0,
            retained_rank: 1,
            rank_deficient: true
        }
    );
    assert_eq!(condition_number(&[4.0, 2.0, 1.0]).kappa(), Some(4.0));
    assert_eq!(condition_number(&[0.0, 0.0]), ConditionNumber::Undefined);
}

#[test]
fn summarize_uniform_case() {
    let f = one_hot_family(4);
    let r = Representation::new(vec![0.0; 4], Readout::Layer(0), "iso").unwrap();
    let s = summarize(&hessian(&f, &r, 4).unwrap()).unwrap();
    assert!((s.effective_rank - 3.0).abs() < 1e-6);
    assert!((s.trace - 0.75).abs() < 1e-12);
    assert!((s.condition_number.unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(s.retained_rank, 3);
    assert!(s.rank_deficient);
}

#[test]
fn summarize_zero_matrix_flags_collapse() {
    let h = HessianEstimate {
        matrix: Tensor::zeros(&[3, 3]),
        n_contexts: 1,
        top_k: 2,
        layer: Readout::Final,
        model_id: "z".into(),
    };
    let s = summarize(&h).unwrap();
    assert!(s.trace_collapse);
    assert_eq!(s.trace, 0.0);
    assert_eq!(s.condition_number, None);
}

#[test]
fn mean_of_summaries_averages_metrics() {
    let f = one_hot_family(4);
    let mk = |l: Vec<f64>| {
        let r = Representation::new(l, Readout::Layer(0), "m").unwrap();
        summarize(&hessian(&f, &r, 4).unwrap()).unwrap()
    };
    let a = mk(vec![0.0; 4]);
    let b = mk(vec![3.0, 0.0, 0.0, 0.0]);
    let m = mean_of_summaries(&[a.clone(), b.clone()]).unwrap();
    assert!((m.effective_rank - 0.5 * (a.effective_rank + b.effective_rank)).abs() < 1e-15);
    assert!(mean_of_summaries(&[]).is_none());
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_of_log_normalizer_is_dual_coords(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = rng.random_range(2..=32);
        let d = rng.random_range(1..=8);
        let f = random_family(&mut rng, v, d);
        let lambda = random_vec(&mut rng, d, 1.5);
        let eta = dual_coords(&f, &lambda).unwrap();
        let fd = fd_gradient(&f, &lambda, 1e-5);
        for (a, b) in eta.iter().zip(&fd) {
            proptest::prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hessian_is_psd_with_covariance_trace(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = rng.random_range(2..=32);
        let d = rng.random_range(1..=8);
        let f = random_family(&mut rng, v, d);
        let lambda = random_vec(&mut rng, d, 3.0);
        let h = hessian_matrix(&f, &lambda, v).unwrap();
        let tr = h.trace();
        let e = crate::numerics::eigh(&h).unwrap();
        proptest::prop_assert!(*e.eigenvalues.last().unwrap() >= -1e-8 * tr);
        let p = f.probs(&lambda).unwrap();
        let eta = dual_coords(&f, &lambda).unwrap();
        let second: f64 = (0..v).map(|y| p[y] * f.gamma(y).iter().map(|g| g * g).sum::<f64>()).sum();
        let identity = second - eta.iter().map(|e| e * e).sum::<f64>();
        proptest::prop_assert!((tr - identity).abs() <= 1e-10 * tr.abs().max(1e-300) + 1e-15);
        let max_norm = (0..v).map(|y| f.gamma(y).iter().map(|g| g * g).sum::<f64>()).fold(0.0, f64::max);
        proptest::prop_assert!(tr >= 0.0 && tr <= max_norm);
    }

    #[test]
    fn effective_rank_is_scale_invariant(
        eig in proptest::collection::vec(0.0f64..10.0, 1..20),
        c in 1e-6f64..1e6,
    ) {
        proptest::prop_assume!(eig.iter().any(|&x| x > 0.0));
        let scaled: Vec<f64> = eig.iter().map(|x| x * c).collect();
        let a = effective_rank(&eig).value;
        let b = effective_rank(&scaled).value;
        proptest::prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        let retained = match condition_number(&eig) {
            ConditionNumber::Defined { retained_rank, .. } => retained_rank,
            ConditionNumber::Undefined => 0,
        };
        proptest::prop_assert!(a >= 1.0 - 1e-12 && a <= retained as f64 + 1e-9);
    }
}
