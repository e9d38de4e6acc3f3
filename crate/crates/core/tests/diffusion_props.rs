use std::sync::Arc;

use diffinfo::diffusion::{
    denoised_mean_gaussian, diffused_conditional_score, diffused_marginal_score, DiffusedGaussian, DiffusionSchedule,
};
use diffinfo::gaussian::{build_joint_spec, JointGaussianSpec};
use diffinfo::linalg::{blend_with_identity, sample_covariance};
use diffinfo::rng;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng as _;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn kernel_preserves_variance(s in 0.0f64..=1.0) {
        let sched = DiffusionSchedule::default();
        let (mu, sigma2) = sched.kernel_params(s).unwrap();
        prop_assert!((mu * mu + sigma2 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn independent_condition_is_ignored(dx in 1usize..6, dy in 1usize..4, s in 0.0f64..1.0, seed in any::<u64>()) {
        let base = build_joint_spec(dx, dy, 1.0, 1e-3, seed).unwrap();
        let spec = JointGaussianSpec::from_matrices(DMatrix::zeros(dy, dx), base.cov_x().clone(), 1.0).unwrap();
        let sched = DiffusionSchedule::default();
        let mut r = rng::seeded(seed);
        let x = DVector::from_fn(dx, |_, _| rng::normal(&mut r));
        let y = DVector::from_fn(dy, |_, _| rng::normal(&mut r));
        let c = diffused_conditional_score(&spec, &sched, &x, s, &y).unwrap();
        let m = diffused_marginal_score(&spec, &sched, &x, s).unwrap();
        prop_assert_eq!(c, m);
    }
}

#[test]
fn miyasawa_relation_at_random_points() {
    let spec = build_joint_spec(6, 3, 0.5, 1e-4, 3).unwrap();
    let sched = DiffusionSchedule::default();
    let mut r = rng::seeded(9);
    for _ in 0..100 {
        let s = r.gen_range(sched.s_min()..0.999);
        let x = DVector::from_fn(6, |_, _| 3.0 * rng::normal(&mut r));
        let (mu, sigma2) = sched.kernel_params(s).unwrap();
        let score = diffused_marginal_score(&spec, &sched, &x, s).unwrap();
        let xhat = denoised_mean_gaussian(&spec, &sched, &x, s).unwrap();
        let tweedie = -(&x - xhat * mu) / sigma2;
        let err = (&score - &tweedie).norm() / score.norm();
        assert!(err < 1e-10, "s={s}: relative error {err}");
    }
}

#[test]
fn empirical_kernel_covariance() {
    let spec = build_joint_spec(3, 2, 1.0, 1e-3, 5).unwrap();
    let sched = DiffusionSchedule::default();
    let s = 0.3;
    let n = 100_000;
    let x0 = spec.sample_pairs(n, 1).unwrap().x;
    let mut r = rng::seeded(2);
    let noise = DMatrix::from_fn(n, 3, |_, _| rng::normal(&mut r));
    let xt = sched.forward_jump_batch(&x0, &noise, s);
    let got = sample_covariance(&xt);
    let want = blend_with_identity(spec.cov_x(), sched.alpha(s));
    for i in 0..3 {
        for j in 0..3 {
            // Gaussian: Var(x_i x_j) = C_ii C_jj + C_ij²
            let se = ((want[(i, i)] * want[(j, j)] + want[(i, j)].powi(2)) / n as f64).sqrt();
            assert!((got[(i, j)] - want[(i, j)]).abs() < 3.0 * se, "({i},{j}): {} vs {}", got[(i, j)], want[(i, j)]);
        }
    }
}

#[test]
fn diffused_covariances_interpolate_monotonically() {
    let spec = build_joint_spec(5, 3, 0.4, 1e-6, 11).unwrap();
    let sched = DiffusionSchedule::default();
    let model = Arc::new(DiffusedGaussian::new(spec.clone(), sched).unwrap());
    let y = DVector::from_element(3, 0.5);
    for data_cov in [spec.cov_x().clone(), spec.conditional_cov().clone()] {
        let eig = SymmetricEigen::new(data_cov.clone());
        let mut prev: Option<Vec<f64>> = None;
        for k in 0..=50 {
            let s = k as f64 / 50.0;
            let cov = blend_with_identity(&data_cov, sched.alpha(s));
            // every eigendirection moves straight from λ toward 1
            let proj: Vec<f64> = (0..5).map(|i| {
                let v = eig.eigenvectors.column(i);
                (v.transpose() * &cov * v)[(0, 0)]
            }).collect();
            if let Some(p) = &prev {
                for i in 0..5 {
                    let toward_one = (proj[i] - 1.0).abs() <= (p[i] - 1.0).abs() + 1e-12;
                    assert!(toward_one, "eigendirection {i} at s={s}");
                }
            }
            prev = Some(proj);
        }
        let at_t = blend_with_identity(&data_cov, sched.alpha(1.0));
        assert!((at_t - DMatrix::identity(5, 5)).amax() < 1e-3);
    }
    let st = model.marginal_state(0.0).unwrap();
    assert!((st.cov - spec.cov_x()).amax() < 1e-12);
    let st = model.conditional_state(&y, 0.0).unwrap();
    assert!((st.cov - spec.conditional_cov()).amax() < 1e-12);
}
