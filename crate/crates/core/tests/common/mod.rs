//! Independent reference implementations used as test oracles. Everything
//! here is straight-line dense linear algebra, deliberately sharing no code
//! with the library's factorizations.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgddpg_core::gp::{GpDataset, KernelHyperparams};

pub fn se(a: &[f64], b: &[f64], sf2: f64, ls: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).zip(ls).map(|((x, y), l)| ((x - y) / l).powi(2)).sum();
    sf2 * (-0.5 * d2).exp()
}

pub fn dense_gram(inputs: &[Vec<f64>], hp: &KernelHyperparams) -> DMatrix<f64> {
    let n = inputs.len();
    DMatrix::from_fn(n, n, |i, j| {
        se(&inputs[i], &inputs[j], hp.signal_variance, &hp.lengthscales)
    })
}

/// Mean and variance by explicit inversion of `K + (σ² + jitter)I`.
pub fn dense_posterior(data: &GpDataset, hp: &KernelHyperparams, z: &[f64]) -> (f64, f64) {
    let n = data.len();
    let prior = se(z, z, hp.signal_variance, &hp.lengthscales);
    if n == 0 {
        return (0.0, prior);
    }
    let a = (dense_gram(&data.inputs, hp) + DMatrix::identity(n, n) * (hp.noise_std.powi(2) + hp.jitter))
        .try_inverse()
        .expect("regularized gram is invertible");
    let kz = DVector::from_iterator(
        n,
        data.inputs
            .iter()
            .map(|x| se(x, z, hp.signal_variance, &hp.lengthscales)),
    );
    let y = DVector::from_vec(data.targets.clone());
    let mean = (kz.transpose() * &a * y)[0];
    let var = prior - (kz.transpose() * &a * &kz)[0];
    (mean, var.max(0.0))
}

/// `k_ii - k_iᵀ (K_{-i} + jI)⁻¹ k_i` by explicit submatrix inversion.
pub fn loo_scores(data: &GpDataset, hp: &KernelHyperparams, jitter: f64) -> Vec<f64> {
    let k = dense_gram(&data.inputs, hp);
    let n = k.nrows();
    if n == 1 {
        return vec![k[(0, 0)]];
    }
    (0..n)
        .map(|i| {
            let rest: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let sub = DMatrix::from_fn(n - 1, n - 1, |a, b| {
                k[(rest[a], rest[b])] + if a == b { jitter } else { 0.0 }
            });
            let ki = DVector::from_fn(n - 1, |a, _| k[(rest[a], i)]);
            let inv = sub.try_inverse().expect("jittered submatrix is invertible");
            k[(i, i)] - (ki.transpose() * inv * &ki)[0]
        })
        .collect()
}

/// `½ log det(I + σ⁻² K)` via LU.
pub fn half_log_det(data: &GpDataset, hp: &KernelHyperparams) -> f64 {
    let n = data.len();
    let m = DMatrix::identity(n, n) + dense_gram(&data.inputs, hp) / hp.noise_std.powi(2);
    0.5 * m.lu().determinant().ln()
}

pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, dim: usize, spread: f64) -> GpDataset {
    let mut d = GpDataset::new(usize::MAX);
    for _ in 0..n {
        let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-spread..spread)).collect();
        d.push(z, rng.random_range(-1.0..1.0)).unwrap();
    }
    d
}

pub fn random_hp(rng: &mut ChaCha8Rng, dim: usize, ls: std::ops::Range<f64>) -> KernelHyperparams {
    KernelHyperparams::new(
        rng.random_range(0.5..2.0),
        (0..dim).map(|_| rng.random_range(ls.clone())).collect(),
        rng.random_range(0.05..0.5),
    )
    .unwrap()
}

/// `(dataset, hyperparameters, query)` with `n ≤ max_n`, `dim ≤ max_dim`.
pub fn gp_problem(max_n: usize, max_dim: usize) -> impl Strategy<Value = (GpDataset, KernelHyperparams, Vec<f64>)> {
    (any::<u64>(), 1..=max_n, 1..=max_dim).prop_map(|(seed, n, dim)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hp = random_hp(&mut rng, dim, 0.3..2.0);
        let d = random_dataset(&mut rng, n, dim, 2.0);
        let z = (0..dim).map(|_| rng.random_range(-2.5..2.5)).collect();
        (d, hp, z)
    })
}

pub fn rel_close(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs_floor
}
