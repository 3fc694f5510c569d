mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sgddpg_core::gp::{
    fit_hyperparams, gram_matrix, kernel_eval, log_marginal_likelihood, log_marginal_likelihood_with_grad, posterior,
    posterior_grad, GpDataset, GpPosterior, KernelHyperparams,
};

#[test]
fn dense_inversion_oracle_fifty_datasets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=50);
        let dim = rng.random_range(1..=5);
        let hp = random_hp(&mut rng, dim, 0.3..2.0);
        let d = random_dataset(&mut rng, n, dim, 2.0);
        let post = GpPosterior::new(&d, &hp).unwrap();
        for _ in 0..10 {
            let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.5..2.5)).collect();
            let got = post.predict(&z).unwrap();
            let (m, v) = dense_posterior(&d, &hp, &z);
            worst = worst.max((got.mean - m).abs()).max((got.variance - v).abs());
        }
    }
    assert!(worst < 1e-8, "worst deviation {worst:e}");
}

#[test]
fn gram_matches_elementwise_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let hp = random_hp(&mut rng, 3, 0.5..1.5);
    let d = random_dataset(&mut rng, 6, 3, 1.0);
    let k = gram_matrix(&d, &hp).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            let want = se(&d.inputs[i], &d.inputs[j], hp.signal_variance, &hp.lengthscales);
            assert!((k[(i, j)] - want).abs() < 1e-15);
        }
    }
}

#[test]
fn kernel_examples() {
    let hp = KernelHyperparams::unit(2);
    assert_eq!(kernel_eval(&[0.3, -1.0], &[0.3, -1.0], &hp).unwrap(), 1.0);
    let v = kernel_eval(&[0.0, 0.0], &[1.0, 1.0], &hp).unwrap();
    assert!((v - 0.367879).abs() < 1e-6);
    let dup = GpDataset::from_pairs(10, [(vec![1.0, 2.0], 0.0), (vec![1.0, 2.0], 1.0)]).unwrap();
    let k = gram_matrix(&dup, &hp).unwrap();
    assert_eq!(k[(0, 1)], k[(0, 0)]);
}

#[test]
fn prior_and_interpolation_limit() {
    let hp = KernelHyperparams::unit(2);
    let empty = GpDataset::new(5);
    let p = posterior(&empty, &hp, &[0.2, 0.1]).unwrap();
    assert_eq!((p.mean, p.variance), (0.0, 1.0));
    let (dm, _) = posterior_grad(&empty, &hp, &[0.2, 0.1]).unwrap();
    assert_eq!(dm, vec![0.0, 0.0]);

    let one = GpDataset::from_pairs(5, [(vec![0.5, 0.5], 1.7)]).unwrap();
    let tiny = KernelHyperparams::new(1.0, vec![1.0, 1.0], 1e-5).unwrap();
    let p = posterior(&one, &tiny, &[0.5, 0.5]).unwrap();
    assert!((p.mean - 1.7).abs() < 1e-8);
    assert!(p.variance < 1e-8);
}

#[test]
fn midpoint_gradient_vanishes_along_separating_axis() {
    let hp = KernelHyperparams::unit(2);
    let d = GpDataset::from_pairs(5, [(vec![-1.0, 0.3], 0.8), (vec![1.0, 0.3], 0.8)]).unwrap();
    let (dm, _) = posterior_grad(&d, &hp, &[0.0, 0.7]).unwrap();
    assert!(dm[0].abs() < 1e-14);
}

#[test]
fn single_point_likelihood_example() {
    let hp = KernelHyperparams::new(1.0, vec![1.0], 0.5).unwrap();
    let d = GpDataset::from_pairs(5, [(vec![0.0], 0.0)]).unwrap();
    let want = -0.5 * 1.25f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((log_marginal_likelihood(&d, &hp).unwrap() - want).abs() < 1e-9);
    assert!((want - -1.03051).abs() < 1e-5);
    assert_eq!(log_marginal_likelihood(&GpDataset::new(3), &hp).unwrap(), 0.0);
}

#[test]
fn posterior_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    for _ in 0..20 {
        let dim = rng.random_range(1..=4);
        let n = rng.random_range(1..=15);
        let hp = random_hp(&mut rng, dim, 0.5..2.0);
        let d = random_dataset(&mut rng, n, dim, 2.0);
        let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (dm, dv) = posterior_grad(&d, &hp, &z).unwrap();
        for i in 0..dim {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[i] += h;
            zm[i] -= h;
            let (mp, vp) = dense_posterior(&d, &hp, &zp);
            let (mm, vm) = dense_posterior(&d, &hp, &zm);
            assert!(rel_close(dm[i], (mp - mm) / (2.0 * h), 1e-4, 1e-8), "mean grad {i}");
            assert!(rel_close(dv[i], (vp - vm) / (2.0 * h), 1e-4, 1e-8), "var grad {i}");
        }
    }
}

#[test]
fn likelihood_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = 1e-5;
    for _ in 0..20 {
        let dim = rng.random_range(1..=4);
        let n = rng.random_range(2..=20);
        let hp = random_hp(&mut rng, dim, 0.5..2.0);
        let d = random_dataset(&mut rng, n, dim, 2.0);
        let (_, grad) = log_marginal_likelihood_with_grad(&d, &hp).unwrap();
        for (i, g) in grad.iter().enumerate() {
            let at = |sign: f64| {
                let mut q = hp.clone();
                let f = (sign * h).exp();
                if i == 0 {
                    q.signal_variance *= f;
                } else {
                    q.lengthscales[i - 1] *= f;
                }
                log_marginal_likelihood(&d, &q).unwrap()
            };
            let fd = (at(1.0) - at(-1.0)) / (2.0 * h);
            assert!(rel_close(*g, fd, 1e-4, 1e-7), "component {i}: {g} vs {fd}");
        }
    }
}

#[test]
fn lengthscale_recovery_from_synthetic_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let truth = KernelHyperparams::new(1.0, vec![0.5], 0.1).unwrap();
    let xs: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random_range(-3.0..3.0)]).collect();
    let k = dense_gram(&xs, &truth) + nalgebra::DMatrix::identity(40, 40) * 1e-8;
    let l = k.cholesky().unwrap().unpack();
    let w = nalgebra::DVector::from_fn(40, |_, _| StandardNormal.sample(&mut rng));
    let f = l * w;
    let mut d = GpDataset::new(100);
    for (i, x) in xs.into_iter().enumerate() {
        let eps: f64 = StandardNormal.sample(&mut rng);
        d.push(x, f[i] + 0.1 * eps).unwrap();
    }
    let start = KernelHyperparams::new(1.0, vec![2.0], 0.1).unwrap();
    let fitted = fit_hyperparams(&d, &start, 200).unwrap();
    let ell = fitted.lengthscales[0];
    assert!((0.25..=0.75).contains(&ell), "recovered lengthscale {ell}");
    assert_eq!(fitted.noise_std, 0.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posterior_matches_dense_oracle((d, hp, z) in gp_problem(50, 5)) {
        let p = posterior(&d, &hp, &z).unwrap();
        let (m, v) = dense_posterior(&d, &hp, &z);
        prop_assert!((p.mean - m).abs() < 1e-8);
        prop_assert!((p.variance - v).abs() < 1e-8);
    }

    #[test]
    fn variance_within_prior((d, hp, z) in gp_problem(30, 4)) {
        let p = posterior(&d, &hp, &z).unwrap();
        prop_assert!(p.variance >= 0.0);
        prop_assert!(p.variance <= hp.signal_variance + 1e-9);
    }

    #[test]
    fn kernel_symmetric_and_bounded((d, hp, z) in gp_problem(3, 5)) {
        let a = &d.inputs[0];
        let k1 = kernel_eval(a, &z, &hp).unwrap();
        prop_assert_eq!(k1, kernel_eval(&z, a, &hp).unwrap());
        prop_assert!(k1 > 0.0 && k1 <= hp.signal_variance);
        prop_assert_eq!(kernel_eval(&z, &z, &hp).unwrap(), hp.signal_variance);
    }

    #[test]
    fn adding_data_never_increases_variance((d, hp, z) in gp_problem(20, 3), extra in proptest::collection::vec(-2.0f64..2.0, 3)) {
        let before = posterior(&d, &hp, &z).unwrap().variance;
        let mut more = d.clone();
        more.push(extra[..hp.dim()].to_vec(), 0.3).unwrap();
        let after = posterior(&more, &hp, &z).unwrap().variance;
        prop_assert!(after <= before + 1e-9);
    }

    #[test]
    fn fitting_never_lowers_likelihood((d, hp, _z) in gp_problem(15, 3), steps in 1usize..6) {
        let before = log_marginal_likelihood(&d, &hp).unwrap();
        let fitted = fit_hyperparams(&d, &hp, steps).unwrap();
        prop_assert!(log_marginal_likelihood(&d, &fitted).unwrap() >= before - 1e-9);
        prop_assert!(fitted.validate().is_ok());
        prop_assert_eq!(fitted.noise_std, hp.noise_std);
    }

    #[test]
    fn batch_prediction_matches_single((d, hp, z) in gp_problem(20, 3)) {
        let mut post = GpPosterior::new(&d, &hp).unwrap();
        let single = post.predict_with_grad(&z).unwrap();
        let batch = post.predict_batch_with_grad(std::slice::from_ref(&z)).unwrap();
        let (s, dm, dv) = &batch[0];
        prop_assert!((s.mean - single.0.mean).abs() < 1e-10);
        prop_assert!((s.variance - single.0.variance).abs() < 1e-10);
        for i in 0..z.len() {
            prop_assert!((dm[i] - single.1[i]).abs() < 1e-10);
            prop_assert!((dv[i] - single.2[i]).abs() < 1e-10);
        }
    }
}
