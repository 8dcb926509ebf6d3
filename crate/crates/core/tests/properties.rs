use proptest::prelude::*;
use steinda_core::discrepancy::{ksd_u_statistic, ksd_v_statistic, regularized_from_gram, SteinGram};
use steinda_core::inference::{mmd_permutation_test, two_sample_test, TwoSampleConfig};
use steinda_core::io::{read_datasets, write_datasets};
use steinda_core::kernels::{gram_matrix, kernel_eval, KernelFamily, KernelSpec};
use steinda_core::nnet::{mlp_backward, mlp_forward, sgd_step, Activation, Mlp, SgdState};
use steinda_core::numeric::{spd_factor, sym_eigen, tree_sum};
use steinda_core::score::{gmm_sgd_step, GaussianModel, GmmModel, ScoreFamily, ScoreFitParams, VARIANCE_CEILING, VARIANCE_FLOOR};
use steinda_core::uda::{make_two_moons, Domain};
use steinda_core::{Mat, RngStream};

fn kernel_strategy() -> impl Strategy<Value = KernelSpec> {
    (prop_oneof![Just(KernelFamily::Rbf), Just(KernelFamily::Imq)], 0.2f64..4.0)
        .prop_map(|(family, bw)| KernelSpec::new(family, bw).unwrap())
}

fn points(seed: u64, n: usize, d: usize, scale: f64) -> Mat {
    let mut m = RngStream::new(seed).normal_mat(n, d);
    m.scale(scale);
    m
}

fn random_spd(seed: u64, d: usize, shift: f64) -> Mat {
    let b = RngStream::new(seed).normal_mat(d, d);
    let mut a = b.matmul_t(&b).unwrap();
    for i in 0..d {
        a[(i, i)] += shift;
    }
    a
}

fn random_gmm(seed: u64, k: usize, d: usize) -> GmmModel {
    let mut rng = RngStream::new(seed);
    let w: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.2, 1.0)).collect();
    let total: f64 = w.iter().sum();
    let means = rng.normal_mat(k, d);
    let vars = Mat::from_fn(k, d, |_, _| rng.uniform_range(0.3, 2.0));
    GmmModel::new(w.iter().map(|v| v / total).collect(), means, vars).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn spd_factor_reconstructs(seed in any::<u64>(), d in 1usize..12, shift in 1e-3f64..10.0) {
        let a = random_spd(seed, d, shift);
        let f = spd_factor(&a, 0.0).unwrap();
        let err = f.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
        prop_assert!(err <= 1e-10, "relative error {err}");
        for i in 0..d {
            prop_assert!(f.lower()[(i, i)] > 0.0);
        }
    }

    #[test]
    fn eigenvalues_sum_to_trace(seed in any::<u64>(), d in 1usize..10, shift in -5.0f64..5.0) {
        let a = random_spd(seed, d, shift);
        let e = sym_eigen(&a).unwrap();
        let sum: f64 = e.values.iter().sum();
        let scale = a.frobenius_norm().max(1e-300);
        prop_assert!((sum - a.trace()).abs() <= 1e-9 * scale);
        prop_assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn rng_streams_are_reproducible(seed in any::<u64>(), tag in any::<u64>()) {
        let mut a = RngStream::new(seed).split(tag);
        let mut b = RngStream::new(seed).split(tag);
        for _ in 0..32 {
            prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
            prop_assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn distinct_seeds_diverge(seed in any::<u64>(), delta in 1u64..u64::MAX) {
        let mut a = RngStream::new(seed);
        let mut b = RngStream::new(seed.wrapping_add(delta));
        let differ = (0..16).any(|_| a.uniform().to_bits() != b.uniform().to_bits());
        prop_assert!(differ);
    }

    #[test]
    fn tree_sum_of_integers_is_exact(xs in prop::collection::vec(-1_000_000i64..1_000_000, 0..200)) {
        let floats: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
        prop_assert_eq!(tree_sum(&floats), xs.iter().sum::<i64>() as f64);
    }

    #[test]
    fn kernel_is_symmetric(spec in kernel_strategy(), seed in any::<u64>(), d in 1usize..6) {
        let p = points(seed, 2, d, 2.0);
        let kxy = kernel_eval(&spec, p.row(0), p.row(1)).unwrap();
        let kyx = kernel_eval(&spec, p.row(1), p.row(0)).unwrap();
        prop_assert_eq!(kxy.to_bits(), kyx.to_bits());
        prop_assert!(kxy > 0.0 && kxy <= 1.0);
    }

    #[test]
    fn gram_is_positive_semidefinite(spec in kernel_strategy(), seed in any::<u64>(), n in 2usize..40, d in 1usize..4) {
        let x = points(seed, n, d, 1.5);
        let g = gram_matrix(&spec, &x);
        prop_assert_eq!(g.asymmetry(), 0.0);
        let e = sym_eigen(&g).unwrap();
        prop_assert!(e.values[0] >= -1e-10, "min eigenvalue {}", e.values[0]);
    }

    #[test]
    fn stein_gram_is_symmetric_and_finite(spec in kernel_strategy(), seed in any::<u64>(), n in 2usize..30, d in 1usize..4) {
        let q = random_gmm(seed ^ 0x5eed, 3, d);
        let x = points(seed, n, d, 2.0);
        let g = SteinGram::new(&spec, &q, &x).unwrap();
        prop_assert!(g.matrix().all_finite());
        prop_assert_eq!(g.matrix().asymmetry(), 0.0);
        prop_assert!(g.v_statistic() >= -1e-12);
    }

    #[test]
    fn ksd_is_permutation_invariant(spec in kernel_strategy(), seed in any::<u64>(), n in 2usize..40, d in 1usize..4) {
        let q = GaussianModel::standard(d);
        let x = points(seed, n, d, 1.3);
        let perm = RngStream::new(seed).split(7).permutation(n);
        let xp = x.select_rows(&perm);
        let a = ksd_u_statistic(&spec, &q, &x).unwrap();
        let b = ksd_u_statistic(&spec, &q, &xp).unwrap();
        prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
        prop_assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());
        prop_assert!(a.std_error >= 0.0);
        let va = ksd_v_statistic(&spec, &q, &x).unwrap();
        let vb = ksd_v_statistic(&spec, &q, &xp).unwrap();
        prop_assert_eq!(va.to_bits(), vb.to_bits());
    }

    #[test]
    fn regularized_ksd_is_bounded_by_v(spec in kernel_strategy(), seed in any::<u64>(), n in 2usize..30, lambda in 1e-4f64..10.0) {
        let q = GaussianModel::standard(2);
        let x = points(seed, n, 2, 1.5);
        let g = SteinGram::new(&spec, &q, &x).unwrap();
        let v = g.v_statistic();
        let r = regularized_from_gram(&g, lambda).unwrap();
        prop_assert!(r >= -1e-12 && r <= v * (1.0 + 1e-9) + 1e-12, "{r} vs {v}");
    }

    #[test]
    fn gmm_sgd_step_keeps_a_valid_mixture(seed in any::<u64>(), k in 1usize..5, lr in 0.0f64..1e3) {
        let model = random_gmm(seed, k, 2);
        let z = points(seed ^ 1, 20, 2, 3.0);
        let next = gmm_sgd_step(&model, &z, lr).unwrap();
        let total: f64 = next.weights().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(next.weights().iter().all(|&w| w >= 0.0));
        prop_assert!(next.variances().data().iter().all(|&v| (VARIANCE_FLOOR..=VARIANCE_CEILING).contains(&v)));
        prop_assert!(next.means().all_finite());
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>(), n in 1usize..8) {
        let net = Mlp::new(&[3, 5, 2], &[Activation::Tanh, Activation::Identity], &RngStream::new(seed)).unwrap();
        let x = points(seed, n, 3, 1.0);
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn plain_sgd_is_gradient_descent(seed in any::<u64>(), lr in 1e-4f64..1.0) {
        let mut net = Mlp::new(&[2, 4, 3], &[Activation::Relu, Activation::Identity], &RngStream::new(seed)).unwrap();
        let x = points(seed ^ 3, 6, 2, 1.0);
        let (out, tape) = mlp_forward(&net, &x).unwrap();
        let (grads, _) = mlp_backward(&net, tape, &out).unwrap();
        let expected: Vec<f64> = net.params_flat().iter().zip(grads.flat()).map(|(w, g)| w - lr * g).collect();
        sgd_step(&mut SgdState::new(lr, 0.0, 0.0), &mut net, &grads).unwrap();
        prop_assert_eq!(net.params_flat(), expected);
    }

    #[test]
    fn dataset_csv_round_trip(seed in any::<u64>(), n in 1usize..40, labeled in any::<bool>()) {
        let mut rng = RngStream::new(seed);
        let src = make_two_moons(2 * n, 0.1, 0.0, &mut rng).unwrap();
        let tgt = make_two_moons(2 * n, 0.1, 30.0, &mut rng).unwrap().with_domain(Domain::Target);
        let tgt = if labeled { tgt } else { tgt.without_labels() };
        prop_assert!(src.labels().unwrap().iter().all(|&l| l < src.classes()));
        let mut buf = Vec::new();
        write_datasets(&mut buf, &[&src, &tgt]).unwrap();
        let split = read_datasets(buf.as_slice()).unwrap();
        prop_assert_eq!(split.source.as_ref(), Some(&src));
        prop_assert_eq!(split.target.as_ref(), Some(&tgt));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn test_results_are_consistent(seed in any::<u64>(), alpha in 0.01f64..0.5) {
        let mut rng = RngStream::new(seed);
        let x = rng.normal_mat(40, 1);
        let z = rng.normal_mat(40, 1);
        let cfg = TwoSampleConfig {
            family: ScoreFamily::Gaussian,
            fit: ScoreFitParams::default(),
            kernel: KernelSpec::rbf(1.0),
            alpha,
            null_draws: 30,
        };
        let r = two_sample_test(&x, &z, &cfg, &mut rng.split(1)).unwrap();
        let again = two_sample_test(&x, &z, &cfg, &mut rng.split(1)).unwrap();
        prop_assert_eq!(&r, &again);
        prop_assert!((0.0..=1.0).contains(&r.p_value));
        prop_assert_eq!(r.reject, r.null_quantile.is_none_or(|q| r.statistic > q));

        let y = rng.normal_mat(30, 1);
        let p = mmd_permutation_test(&x, &y, &KernelSpec::rbf(1.0), 30, alpha, &mut rng.split(2)).unwrap();
        prop_assert!((0.0..=1.0).contains(&p.p_value));
        prop_assert_eq!(p.reject, p.null_quantile.is_none_or(|q| p.statistic > q));
    }
}

