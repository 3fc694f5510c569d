//! Confidence scaling β_n and the safety interval `[l_n, u_n]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{factor_with_jitter, gram_of, GpDataset, KernelHyperparams, PosteriorStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaMode {
    Fixed,
    Online,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaConfig {
    pub mode: BetaMode,
    pub fixed_value: f64,
    pub delta: f64,
    pub rkhs_floor: f64,
}

impl Default for BetaConfig {
    fn default() -> Self {
        Self {
            mode: BetaMode::Fixed,
            fixed_value: 2.0,
            delta: 0.1,
            rkhs_floor: 1.0,
        }
    }
}

impl BetaConfig {
    pub fn fixed(value: f64) -> Self {
        Self {
            mode: BetaMode::Fixed,
            fixed_value: value,
            ..Self::default()
        }
    }

    pub fn online(delta: f64) -> Self {
        Self {
            mode: BetaMode::Online,
            delta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fixed_value > 0.0 && self.fixed_value.is_finite()) {
            return Err(Error::Config("beta fixed value must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config("beta delta must lie in (0, 1)".into()));
        }
        if !(self.rkhs_floor >= 0.0 && self.rkhs_floor.is_finite()) {
            return Err(Error::Config("rkhs floor must be non-negative".into()));
        }
        Ok(())
    }
}

/// Parses `fixed:<value>` or `online:<delta>`.
impl FromStr for BetaConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (mode, value) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("expected fixed:<v> or online:<delta>, got {s:?}")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad beta value in {s:?}")))?;
        let cfg = match mode.trim() {
            "fixed" => Self::fixed(value),
            "online" => Self::online(value),
            other => return Err(Error::Config(format!("unknown beta mode {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for BetaConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            BetaMode::Fixed => write!(f, "fixed:{}", self.fixed_value),
            BetaMode::Online => write!(f, "online:{}", self.delta),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyBound {
    pub mean: f64,
    pub std: f64,
    pub beta: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Information capacity of the dataset: the mutual information between the
/// measurements and the latent function,
///
/// ```text
/// γ = ½ Σ_i log(1 + σ²_{i-1}(z_i) / σ²) = ½ log det(I + σ⁻² K_n)
/// ```
///
/// where `σ²_{i-1}(z_i)` is the latent posterior variance of element `i`
/// given the noisy measurements of elements before it.
pub fn info_capacity(data: &GpDataset, hp: &KernelHyperparams) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let k = gram_of(&data.inputs, hp);
    // Cholesky of K + σ²I: L_ii² = σ² + σ²_{i-1}(z_i).
    let exact = hp.clone().with_jitter(0.0);
    let (chol, shift) = factor_with_jitter(&k, hp.noise_variance(), &exact)?;
    let sigma2 = hp.noise_variance();
    let total = chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|l| {
            let cond_var = (l * l - shift).max(0.0);
            0.5 * (1.0 + cond_var / sigma2).ln()
        })
        .sum();
    Ok(total)
}

/// RKHS-norm estimate `max(floor, sqrt(yᵀ K_n⁻¹ y))` of the measurements.
pub fn rkhs_bound(data: &GpDataset, hp: &KernelHyperparams, floor: f64) -> Result<f64> {
    if data.is_empty() {
        return Ok(floor);
    }
    let k = gram_of(&data.inputs, hp);
    let (chol, _) = factor_with_jitter(&k, 0.0, hp)?;
    let y = data.targets_vector();
    let quad = y.dot(&chol.solve(&y)).max(0.0);
    Ok(quad.sqrt().max(floor))
}

/// `B^{1/2} + 4σ·sqrt(γ + 1 + ln(2/δ))`.
pub fn online_beta(rkhs: f64, noise_std: f64, gamma: f64, delta: f64) -> f64 {
    rkhs.sqrt() + 4.0 * noise_std * (gamma + 1.0 + (2.0 / delta).ln()).sqrt()
}

pub fn beta(config: &BetaConfig, data: &GpDataset, hp: &KernelHyperparams) -> Result<f64> {
    config.validate()?;
    match config.mode {
        BetaMode::Fixed => Ok(config.fixed_value),
        BetaMode::Online => {
            let b = rkhs_bound(data, hp, config.rkhs_floor)?;
            let gamma = info_capacity(data, hp)?;
            let value = online_beta(b, hp.noise_std, gamma, config.delta);
            if value > 0.0 && value.is_finite() {
                Ok(value)
            } else {
                Err(Error::NonFinite("beta"))
            }
        }
    }
}

pub fn bounds(stats: PosteriorStats, beta_value: f64) -> SafetyBound {
    let std = stats.std();
    SafetyBound {
        mean: stats.mean,
        std,
        beta: beta_value,
        lower: stats.mean - beta_value * std,
        upper: stats.mean + beta_value * std,
    }
}
