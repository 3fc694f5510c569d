//! User-facing numerical self-test of the GP stack: dense-inversion
//! equivalence, finite-difference gradients, leave-one-out independence
//! scores, the information-capacity identity and confidence coverage.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::confidence::{self, BetaConfig};
use crate::error::Result;
use crate::gp::sparsify::independence_scores;
use crate::gp::{
    gram_matrix, log_marginal_likelihood, log_marginal_likelihood_with_grad, GpDataset, GpPosterior, KernelHyperparams,
};

#[derive(Clone, Debug)]
pub struct SelftestOptions {
    /// Number of prior-sampled functions in the coverage check.
    pub trials: usize,
    pub seed: u64,
    /// Test hook: flips the sign of the posterior mean before comparison.
    pub inject_fault: bool,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            trials: 200,
            seed: 0,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed error or rate.
    pub value: f64,
    pub tolerance: f64,
}

fn random_problem(rng: &mut ChaCha8Rng, max_n: usize, max_dim: usize) -> (GpDataset, KernelHyperparams) {
    random_problem_with(rng, max_n, 1..=max_dim, 0.5..2.0)
}

fn random_problem_with(
    rng: &mut ChaCha8Rng,
    max_n: usize,
    dims: std::ops::RangeInclusive<usize>,
    lengthscales: std::ops::Range<f64>,
) -> (GpDataset, KernelHyperparams) {
    let dim = rng.random_range(dims);
    let n = rng.random_range(1..=max_n);
    let hp = KernelHyperparams::new(
        rng.random_range(0.5..2.0),
        (0..dim).map(|_| rng.random_range(lengthscales.clone())).collect(),
        rng.random_range(0.05..0.5),
    )
    .expect("positive hyperparameters");
    let mut d = GpDataset::new(usize::MAX);
    for _ in 0..n {
        let z = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        d.push(z, rng.random_range(-1.0..1.0)).expect("finite pair");
    }
    (d, hp)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn oracle_check(rng: &mut ChaCha8Rng, fault: bool) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (d, hp) = random_problem(rng, 50, 5);
        let n = d.len();
        let k = gram_matrix(&d, &hp)?;
        let a = (k + DMatrix::identity(n, n) * (hp.noise_variance() + hp.jitter))
            .try_inverse()
            .expect("regularized gram matrix is invertible");
        let y = d.targets_vector();
        let post = GpPosterior::new(&d, &hp)?;
        for _ in 0..5 {
            let z: Vec<f64> = (0..hp.dim()).map(|_| rng.random_range(-2.5..2.5)).collect();
            let kz = DVector::from_iterator(n, d.inputs.iter().map(|x| hp.k(x, &z)));
            let mean = kz.dot(&(&a * &y));
            let var = hp.signal_variance - kz.dot(&(&a * &kz));
            let mut got = post.predict(&z)?;
            if fault {
                got.mean = -got.mean;
            }
            worst = worst
                .max((got.mean - mean).abs())
                .max((got.variance - var.max(0.0)).abs());
        }
    }
    Ok(worst)
}

fn posterior_gradient_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (d, hp) = random_problem(rng, 20, 4);
        let post = GpPosterior::new(&d, &hp)?;
        let z: Vec<f64> = (0..hp.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, dmean, dvar) = post.predict_with_grad(&z)?;
        for i in 0..z.len() {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[i] += h;
            zm[i] -= h;
            let (p, m) = (post.predict(&zp)?, post.predict(&zm)?);
            let fd_mean = (p.mean - m.mean) / (2.0 * h);
            let fd_var = (p.variance - m.variance) / (2.0 * h);
            worst = worst
                .max(rel_err(dmean[i], fd_mean).min((dmean[i] - fd_mean).abs() / 1e-3))
                .max(rel_err(dvar[i], fd_var).min((dvar[i] - fd_var).abs() / 1e-3));
        }
    }
    Ok(worst)
}

fn likelihood_gradient_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (d, hp) = random_problem(rng, 20, 4);
        let (_, grad) = log_marginal_likelihood_with_grad(&d, &hp)?;
        for (i, g) in grad.iter().enumerate() {
            let perturb = |sign: f64| {
                let mut q = hp.clone();
                let f = (sign * h).exp();
                if i == 0 {
                    q.signal_variance *= f;
                } else {
                    q.lengthscales[i - 1] *= f;
                }
                log_marginal_likelihood(&d, &q)
            };
            let fd = (perturb(1.0)? - perturb(-1.0)?) / (2.0 * h);
            worst = worst.max(rel_err(*g, fd).min((g - fd).abs() / 1e-3));
        }
    }
    Ok(worst)
}

fn independence_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        // noise-free scores are only well conditioned for spread-out inputs
        let (d, hp) = random_problem_with(rng, 12, 2..=3, 0.3..0.8);
        if d.len() < 2 {
            continue;
        }
        let n = d.len();
        let scores = independence_scores(&d, &hp)?.scores;
        let k = gram_matrix(&d, &hp)?;
        for i in 0..n {
            let rest: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let sub = k.select_rows(&rest).select_columns(&rest) + DMatrix::identity(n - 1, n - 1) * hp.jitter;
            let ki = k.column(i).select_rows(&rest);
            let Some(inv) = sub.try_inverse() else { continue };
            let loo = k[(i, i)] - ki.dot(&(inv * &ki));
            worst = worst.max((scores[i] - loo.max(0.0)).abs());
        }
    }
    Ok(worst)
}

fn capacity_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let (d, hp) = random_problem(rng, 20, 3);
        let n = d.len();
        let m = DMatrix::identity(n, n) + gram_matrix(&d, &hp)? / hp.noise_variance();
        let want = 0.5 * m.determinant().ln();
        worst = worst.max((confidence::info_capacity(&d, &hp)? - want).abs());
    }
    Ok(worst)
}

/// Fraction of (function, test point) pairs where the online-β band misses
/// the true function value.
pub fn coverage_violation_rate(trials: usize, n_train: usize, n_test: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hp = KernelHyperparams::new(1.0, vec![0.5, 0.5], 0.1)?;
    let cfg = BetaConfig::online(0.1);
    let total = n_train + n_test;
    let mut violations = 0usize;
    for _ in 0..trials {
        let pts: Vec<Vec<f64>> = (0..total)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let mut k = DMatrix::from_fn(total, total, |i, j| hp.k(&pts[i], &pts[j]));
        for i in 0..total {
            k[(i, i)] += 1e-8;
        }
        let l = k.cholesky().expect("jittered prior covariance").unpack();
        let w = DVector::from_fn(total, |_, _| StandardNormal.sample(&mut rng));
        let f = l * w;
        let mut d = GpDataset::new(usize::MAX);
        for i in 0..n_train {
            let eps: f64 = StandardNormal.sample(&mut rng);
            d.push(pts[i].clone(), f[i] + hp.noise_std * eps)?;
        }
        let beta = confidence::beta(&cfg, &d, &hp)?;
        let post = GpPosterior::new(&d, &hp)?;
        for i in n_train..total {
            let b = confidence::bounds(post.predict(&pts[i])?, beta);
            if f[i] < b.lower || f[i] > b.upper {
                violations += 1;
            }
        }
    }
    Ok(violations as f64 / (trials * n_test).max(1) as f64)
}

pub fn run_selftest(opts: &SelftestOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let check = |name, value: f64, tolerance| CheckResult {
        name,
        passed: value <= tolerance,
        value,
        tolerance,
    };
    Ok(vec![
        check(
            "posterior vs dense inversion",
            oracle_check(&mut rng, opts.inject_fault)?,
            1e-8,
        ),
        check(
            "posterior gradients vs finite differences",
            posterior_gradient_check(&mut rng)?,
            1e-4,
        ),
        check(
            "likelihood gradient vs finite differences",
            likelihood_gradient_check(&mut rng)?,
            1e-4,
        ),
        check(
            "independence scores vs leave-one-out",
            independence_check(&mut rng)?,
            1e-8,
        ),
        check(
            "information capacity vs log-determinant",
            capacity_check(&mut rng)?,
            1e-8,
        ),
        check(
            "confidence band violation rate",
            coverage_violation_rate(opts.trials, 15, 50, opts.seed.wrapping_add(1))?,
            0.15,
        ),
    ])
}
