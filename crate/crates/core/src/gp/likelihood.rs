use std::f64::consts::PI;

use nalgebra::DMatrix;

use super::{factor_with_jitter, gram_of, GpDataset, KernelHyperparams};
use crate::error::Result;

const FIT_STEP: f64 = 1e-2;
const MAX_HALVINGS: usize = 20;
const LOG_PARAM_LIMIT: f64 = 12.0;

/// `log p(y | D) = -½ yᵀ(K + σ²I)⁻¹y - ½ log|K + σ²I| - (n/2) log 2π`.
///
/// Zero for an empty dataset.
pub fn log_marginal_likelihood(data: &GpDataset, hp: &KernelHyperparams) -> Result<f64> {
    hp.validate()?;
    data.check_against(hp)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let k = gram_of(&data.inputs, hp);
    let (chol, _) = factor_with_jitter(&k, hp.noise_variance(), hp)?;
    let y = data.targets_vector();
    let alpha = chol.solve(&y);
    let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    let n = data.len() as f64;
    Ok(-0.5 * y.dot(&alpha) - log_det_half - 0.5 * n * (2.0 * PI).ln())
}

/// Log marginal likelihood and its gradient with respect to
/// `[ln signal_variance, ln ℓ_1, …, ln ℓ_D]`. The noise term is held fixed.
pub fn log_marginal_likelihood_with_grad(data: &GpDataset, hp: &KernelHyperparams) -> Result<(f64, Vec<f64>)> {
    hp.validate()?;
    data.check_against(hp)?;
    let dim = hp.dim();
    if data.is_empty() {
        return Ok((0.0, vec![0.0; dim + 1]));
    }
    let n = data.len();
    let k = gram_of(&data.inputs, hp);
    let (chol, _) = factor_with_jitter(&k, hp.noise_variance(), hp)?;
    let y = data.targets_vector();
    let alpha = chol.solve(&y);
    let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    let value = -0.5 * y.dot(&alpha) - log_det_half - 0.5 * n as f64 * (2.0 * PI).ln();

    // ∂L/∂θ = ½ tr((ααᵀ - A) ∂K/∂θ)
    let inv = chol.inverse();
    let w: DMatrix<f64> = &alpha * alpha.transpose() - inv;
    let mut grad = vec![0.0; dim + 1];
    let inv_l2: Vec<f64> = hp.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    for i in 0..n {
        for j in 0..n {
            let wk = w[(i, j)] * k[(i, j)];
            grad[0] += wk;
            if i != j {
                let (xi, xj) = (&data.inputs[i], &data.inputs[j]);
                for d in 0..dim {
                    let diff = xi[d] - xj[d];
                    grad[d + 1] += wk * diff * diff * inv_l2[d];
                }
            }
        }
    }
    grad.iter_mut().for_each(|g| *g *= 0.5);
    Ok((value, grad))
}

fn to_log_params(hp: &KernelHyperparams) -> Vec<f64> {
    std::iter::once(hp.signal_variance.ln())
        .chain(hp.lengthscales.iter().map(|l| l.ln()))
        .collect()
}

fn from_log_params(base: &KernelHyperparams, theta: &[f64]) -> KernelHyperparams {
    let clamp = |v: f64| v.clamp(-LOG_PARAM_LIMIT, LOG_PARAM_LIMIT).exp();
    KernelHyperparams {
        signal_variance: clamp(theta[0]),
        lengthscales: theta[1..].iter().map(|t| clamp(*t)).collect(),
        noise_std: base.noise_std,
        jitter: base.jitter,
    }
}

/// Gradient ascent on the log marginal likelihood in log-parameter space.
///
/// Each step starts at a fixed step size and halves it (up to 20 times)
/// until the likelihood does not decrease. The noise level stays fixed. A
/// step that finds no improvement ends the search.
pub fn fit_hyperparams(data: &GpDataset, hp: &KernelHyperparams, steps: usize) -> Result<KernelHyperparams> {
    if steps == 0 || data.is_empty() {
        return Ok(hp.clone());
    }
    let (mut best_value, mut grad) = log_marginal_likelihood_with_grad(data, hp)?;
    let mut best = hp.clone();
    let mut theta = to_log_params(hp);

    for _ in 0..steps {
        let mut step = FIT_STEP;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + step * g).collect();
            let cand_hp = from_log_params(hp, &candidate);
            if let Ok((v, g)) = log_marginal_likelihood_with_grad(data, &cand_hp) {
                if v.is_finite() && v >= best_value && g.iter().all(|x| x.is_finite()) {
                    accepted = Some((candidate, cand_hp, v, g));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((t, h, v, g)) => {
                theta = t;
                best = h;
                best_value = v;
                grad = g;
            }
            None => break,
        }
    }
    Ok(best)
}
