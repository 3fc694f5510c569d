//! Exact Gaussian-process regression over state-action inputs.
//!
//! The kernel is squared-exponential with one lengthscale per input
//! dimension:
//!
//! ```text
//! k(z, z') = s² · exp(-½ Σ_d ((z_d - z'_d) / ℓ_d)²)
//! ```
//!
//! Linear solves go through a Cholesky factor of `K + (σ² + jitter)·I`. When
//! the factorization fails the jitter is escalated from `1e-10·s²` by factors
//! of ten up to `1e-4·s²` before giving up.

mod likelihood;
pub mod sparsify;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use likelihood::{fit_hyperparams, log_marginal_likelihood, log_marginal_likelihood_with_grad};

pub const DEFAULT_JITTER: f64 = 1e-10;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// SE-ARD kernel parameters plus the observation-noise bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    /// Noise standard deviation σ. Also the radius of the measurement-validity ball.
    pub noise_std: f64,
    pub jitter: f64,
}

impl KernelHyperparams {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>, noise_std: f64) -> Result<Self> {
        let hp = Self {
            signal_variance,
            lengthscales,
            noise_std,
            jitter: DEFAULT_JITTER,
        };
        hp.validate()?;
        Ok(hp)
    }

    /// Unit signal variance and lengthscales, σ = 0.1.
    pub fn unit(dim: usize) -> Self {
        Self {
            signal_variance: 1.0,
            lengthscales: vec![1.0; dim],
            noise_std: 0.1,
            jitter: DEFAULT_JITTER,
        }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidHyperparams(msg.to_string()));
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return bad("signal_variance must be positive");
        }
        if self.lengthscales.is_empty() {
            return bad("at least one lengthscale is required");
        }
        if self.lengthscales.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return bad("lengthscales must be positive");
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be positive");
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad("jitter must be non-negative");
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_std * self.noise_std
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    /// Kernel value without dimension checks.
    #[inline]
    pub(crate) fn k(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((x, y), l) in a.iter().zip(b).zip(&self.lengthscales) {
            let d = (x - y) / l;
            acc += d * d;
        }
        self.signal_variance * (-0.5 * acc).exp()
    }
}

/// Capacity-bounded set of (input, measurement) pairs.
///
/// The capacity is enforced by [`sparsify::evict_to_capacity`]; staging new
/// data with [`GpDataset::extend`] may overshoot it temporarily.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpDataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub capacity: usize,
}

impl GpDataset {
    pub fn new(capacity: usize) -> Self {
        Self {
            inputs: Vec::new(),
            targets: Vec::new(),
            capacity,
        }
    }

    pub fn from_pairs(capacity: usize, pairs: impl IntoIterator<Item = (Vec<f64>, f64)>) -> Result<Self> {
        let mut d = Self::new(capacity);
        for (z, y) in pairs {
            d.push(z, y)?;
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.inputs.first().map(Vec::len)
    }

    pub fn is_within_capacity(&self) -> bool {
        self.len() <= self.capacity
    }

    pub fn push(&mut self, z: Vec<f64>, y: f64) -> Result<()> {
        if let Some(d) = self.dim() {
            if z.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: z.len(),
                });
            }
        }
        if !y.is_finite() || z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gp dataset element"));
        }
        self.inputs.push(z);
        self.targets.push(y);
        Ok(())
    }

    /// Appends every pair of `other`, keeping this dataset's capacity.
    pub fn extend(&mut self, other: &GpDataset) -> Result<()> {
        for (z, y) in other.inputs.iter().zip(&other.targets) {
            self.push(z.clone(), *y)?;
        }
        Ok(())
    }

    pub fn remove(&mut self, idx: usize) -> (Vec<f64>, f64) {
        (self.inputs.remove(idx), self.targets.remove(idx))
    }

    /// Keeps the listed indices (ascending) and drops the rest.
    pub fn select(&self, keep: &[usize]) -> GpDataset {
        GpDataset {
            inputs: keep.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: keep.iter().map(|&i| self.targets[i]).collect(),
            capacity: self.capacity,
        }
    }

    pub fn targets_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.targets)
    }

    fn check_against(&self, hp: &KernelHyperparams) -> Result<()> {
        match self.dim() {
            Some(d) => hp.check_dim(d),
            None => Ok(()),
        }
    }
}

/// Posterior mean and variance at one query point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorStats {
    pub mean: f64,
    pub variance: f64,
}

impl PosteriorStats {
    pub fn std(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }
}

pub fn kernel_eval(z: &[f64], z2: &[f64], hp: &KernelHyperparams) -> Result<f64> {
    hp.check_dim(z.len())?;
    hp.check_dim(z2.len())?;
    Ok(hp.k(z, z2))
}

/// Noise-free covariance matrix `K_n` of the dataset inputs.
pub fn gram_matrix(data: &GpDataset, hp: &KernelHyperparams) -> Result<DMatrix<f64>> {
    data.check_against(hp)?;
    Ok(gram_of(&data.inputs, hp))
}

pub(crate) fn gram_of(inputs: &[Vec<f64>], hp: &KernelHyperparams) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hp.signal_variance;
        for j in 0..i {
            let v = hp.k(&inputs[i], &inputs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Factors `k + (diag + hp.jitter)·I`, escalating the jitter on failure.
///
/// Returns the factor and the total diagonal shift that was added.
pub(crate) fn factor_with_jitter(
    k: &DMatrix<f64>,
    diag: f64,
    hp: &KernelHyperparams,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let scale = hp.signal_variance;
    let mut jitters = vec![hp.jitter];
    let mut j = JITTER_START * scale;
    while j <= JITTER_MAX * scale * (1.0 + 1e-12) {
        if j > hp.jitter {
            jitters.push(j);
        }
        j *= 10.0;
    }
    let mut last = hp.jitter;
    for jitter in jitters {
        last = jitter;
        let shift = diag + jitter;
        let mut m = k.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += shift;
        }
        if let Some(ch) = Cholesky::new(m) {
            if ch.l_dirty().diagonal().iter().all(|v| v.is_finite() && *v > 0.0) {
                return Ok((ch, shift));
            }
        }
    }
    Err(Error::Factorization { jitter: last })
}

/// Posterior statistics with the gradients of the mean and variance.
pub type PredictionWithGrad = (PosteriorStats, Vec<f64>, Vec<f64>);

/// Cached posterior quantities for repeated queries against one dataset.
///
/// Holds the Cholesky factor of `K + (σ² + jitter)·I` and the weight vector
/// `α = (K + σ²I)⁻¹ y`.
pub struct GpPosterior<'a> {
    data: &'a GpDataset,
    hp: &'a KernelHyperparams,
    chol: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
    inverse: Option<DMatrix<f64>>,
}

impl<'a> GpPosterior<'a> {
    pub fn new(data: &'a GpDataset, hp: &'a KernelHyperparams) -> Result<Self> {
        hp.validate()?;
        data.check_against(hp)?;
        if data.is_empty() {
            return Ok(Self {
                data,
                hp,
                chol: None,
                alpha: DVector::zeros(0),
                inverse: None,
            });
        }
        let k = gram_of(&data.inputs, hp);
        let (chol, _) = factor_with_jitter(&k, hp.noise_variance(), hp)?;
        let alpha = chol.solve(&data.targets_vector());
        Ok(Self {
            data,
            hp,
            chol: Some(chol),
            alpha,
            inverse: None,
        })
    }

    pub fn hyperparams(&self) -> &KernelHyperparams {
        self.hp
    }

    pub fn dataset(&self) -> &GpDataset {
        self.data
    }

    fn kernel_vector(&self, z: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.data.len(), self.data.inputs.iter().map(|x| self.hp.k(z, x)))
    }

    pub fn predict(&self, z: &[f64]) -> Result<PosteriorStats> {
        self.hp.check_dim(z.len())?;
        let prior = self.hp.signal_variance;
        let Some(chol) = &self.chol else {
            return Ok(PosteriorStats {
                mean: 0.0,
                variance: prior,
            });
        };
        let kv = self.kernel_vector(z);
        let mean = kv.dot(&self.alpha);
        let v = chol.solve(&kv);
        let variance = (prior - kv.dot(&v)).max(0.0);
        Ok(PosteriorStats { mean, variance })
    }

    /// Posterior statistics plus gradients of the mean and variance with
    /// respect to the query point.
    pub fn predict_with_grad(&self, z: &[f64]) -> Result<PredictionWithGrad> {
        self.hp.check_dim(z.len())?;
        let dim = z.len();
        let Some(chol) = &self.chol else {
            let stats = PosteriorStats {
                mean: 0.0,
                variance: self.hp.signal_variance,
            };
            return Ok((stats, vec![0.0; dim], vec![0.0; dim]));
        };
        let kv = self.kernel_vector(z);
        let v = chol.solve(&kv);
        Ok(self.assemble(z, &kv, &v))
    }

    /// Batched form of [`Self::predict_with_grad`] using an explicit inverse.
    pub fn predict_batch_with_grad(&mut self, zs: &[Vec<f64>]) -> Result<Vec<PredictionWithGrad>> {
        for z in zs {
            self.hp.check_dim(z.len())?;
        }
        if self.chol.is_none() {
            return zs.iter().map(|z| self.predict_with_grad(z)).collect();
        }
        if self.inverse.is_none() {
            self.inverse = self.chol.as_ref().map(|c| c.inverse());
        }
        let inv = self.inverse.as_ref().expect("inverse computed above");
        let n = self.data.len();
        let kmat = DMatrix::from_fn(n, zs.len(), |i, j| self.hp.k(&zs[j], &self.data.inputs[i]));
        let vmat = inv * &kmat;
        Ok(zs
            .iter()
            .enumerate()
            .map(|(j, z)| {
                let kv = kmat.column(j).into_owned();
                let v = vmat.column(j).into_owned();
                self.assemble(z, &kv, &v)
            })
            .collect())
    }

    fn assemble(&self, z: &[f64], kv: &DVector<f64>, v: &DVector<f64>) -> PredictionWithGrad {
        let dim = z.len();
        let mean = kv.dot(&self.alpha);
        let variance = (self.hp.signal_variance - kv.dot(v)).max(0.0);
        let mut dmean = vec![0.0; dim];
        let mut dvar = vec![0.0; dim];
        // dk_i/dz_d = -k_i (z_d - x_id) / ℓ_d²
        for (i, x) in self.data.inputs.iter().enumerate() {
            let ki = kv[i];
            let wa = self.alpha[i] * ki;
            let wv = -2.0 * v[i] * ki;
            for d in 0..dim {
                let l = self.hp.lengthscales[d];
                let dk = -(z[d] - x[d]) / (l * l);
                dmean[d] += wa * dk;
                dvar[d] += wv * dk;
            }
        }
        (PosteriorStats { mean, variance }, dmean, dvar)
    }
}

/// Posterior mean `k_n(z)ᵀ(K_n + σ²I)⁻¹y_n` and variance
/// `k(z,z) - k_n(z)ᵀ(K_n + σ²I)⁻¹k_n(z)` at `z`.
pub fn posterior(data: &GpDataset, hp: &KernelHyperparams, z: &[f64]) -> Result<PosteriorStats> {
    GpPosterior::new(data, hp)?.predict(z)
}

/// Gradients of the posterior mean and variance with respect to `z`.
pub fn posterior_grad(data: &GpDataset, hp: &KernelHyperparams, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (_, dm, dv) = GpPosterior::new(data, hp)?.predict_with_grad(z)?;
    Ok((dm, dv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(dim: usize) -> KernelHyperparams {
        KernelHyperparams::unit(dim)
    }

    #[test]
    fn kernel_at_zero_distance_is_signal_variance() {
        let z = [0.3, -1.2, 4.0];
        assert_eq!(kernel_eval(&z, &z, &hp(3)).unwrap(), 1.0);
        let mut h = hp(3);
        h.signal_variance = 2.7;
        assert_eq!(kernel_eval(&z, &z, &h).unwrap(), 2.7);
    }

    #[test]
    fn kernel_squared_distance_two() {
        let v = kernel_eval(&[0.0, 0.0], &[1.0, 1.0], &hp(2)).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn kernel_dimension_mismatch() {
        assert!(matches!(
            kernel_eval(&[0.0], &[1.0, 1.0], &hp(2)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn gram_single_and_duplicates() {
        let mut h = hp(2);
        h.signal_variance = 3.0;
        let d = GpDataset::from_pairs(5, vec![(vec![0.1, 0.2], 1.0)]).unwrap();
        let k = gram_matrix(&d, &h).unwrap();
        assert_eq!(k.shape(), (1, 1));
        assert_eq!(k[(0, 0)], 3.0);

        let d = GpDataset::from_pairs(5, vec![(vec![0.1, 0.2], 1.0), (vec![0.1, 0.2], 2.0)]).unwrap();
        let k = gram_matrix(&d, &h).unwrap();
        assert_eq!(k[(0, 1)], k[(0, 0)]);
    }

    #[test]
    fn empty_dataset_gives_prior() {
        let d = GpDataset::new(10);
        let s = posterior(&d, &hp(3), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 0.0);
        assert_eq!(s.variance, 1.0);
        let (dm, dv) = posterior_grad(&d, &hp(3), &[1.0, 2.0, 3.0]).unwrap();
        assert!(dm.iter().chain(&dv).all(|v| *v == 0.0));
    }

    #[test]
    fn interpolates_in_small_noise_limit() {
        let mut h = hp(2);
        h.noise_std = 1e-6;
        h.jitter = 0.0;
        let d = GpDataset::from_pairs(4, vec![(vec![0.5, -0.5], 0.8)]).unwrap();
        let s = posterior(&d, &h, &[0.5, -0.5]).unwrap();
        assert!((s.mean - 0.8).abs() < 1e-9);
        assert!(s.variance < 1e-9);
    }

    #[test]
    fn midpoint_gradient_vanishes_along_axis() {
        let d = GpDataset::from_pairs(4, vec![(vec![-1.0, 0.3], 0.7), (vec![1.0, 0.3], 0.7)]).unwrap();
        let (dm, _) = posterior_grad(&d, &hp(2), &[0.0, 0.3]).unwrap();
        assert!(dm[0].abs() < 1e-14);
    }

    #[test]
    fn query_dimension_checked() {
        let d = GpDataset::from_pairs(4, vec![(vec![0.0, 0.0], 1.0)]).unwrap();
        assert!(posterior(&d, &hp(2), &[0.0]).is_err());
        assert!(GpPosterior::new(&d, &hp(3)).is_err());
    }

    #[test]
    fn dataset_rejects_mixed_dims() {
        let mut d = GpDataset::new(3);
        d.push(vec![0.0, 1.0], 0.0).unwrap();
        assert!(d.push(vec![0.0], 0.0).is_err());
    }

    #[test]
    fn hyperparam_validation() {
        assert!(KernelHyperparams::new(0.0, vec![1.0], 0.1).is_err());
        assert!(KernelHyperparams::new(1.0, vec![-1.0], 0.1).is_err());
        assert!(KernelHyperparams::new(1.0, vec![1.0], 0.0).is_err());
        assert!(KernelHyperparams::new(1.0, vec![1.0], 0.1).is_ok());
    }

    #[test]
    fn batch_matches_single_queries() {
        let pts: Vec<(Vec<f64>, f64)> = (0..7)
            .map(|i| {
                let t = i as f64 * 0.37;
                (vec![t.sin(), t.cos() * 0.5], (2.0 * t).sin())
            })
            .collect();
        let d = GpDataset::from_pairs(10, pts).unwrap();
        let h = hp(2);
        let mut post = GpPosterior::new(&d, &h).unwrap();
        let qs = vec![vec![0.1, 0.2], vec![-0.4, 0.9]];
        let batch = post.predict_batch_with_grad(&qs).unwrap();
        for (q, (s, dm, dv)) in qs.iter().zip(batch) {
            let (s1, dm1, dv1) = post.predict_with_grad(q).unwrap();
            assert!((s.mean - s1.mean).abs() < 1e-10);
            assert!((s.variance - s1.variance).abs() < 1e-10);
            for k in 0..2 {
                assert!((dm[k] - dm1[k]).abs() < 1e-9);
                assert!((dv[k] - dv1[k]).abs() < 1e-9);
            }
        }
    }
}
