//! Feed-forward networks with exact reverse-mode gradients.
//!
//! Batched calls take inputs as columns of a matrix. ReLU uses subgradient 0
//! at a zero pre-activation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    #[inline]
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Gradient (or moment) buffers shaped like an [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &MlpParams) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
            biases: net.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .flat_map(|w| w.iter_mut())
            .chain(self.biases.iter_mut().flat_map(|b| b.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Layer inputs and outputs from a batched forward pass.
pub struct ForwardCache {
    /// `inputs[i]` feeds layer `i`; the last entry is the network output.
    activations: Vec<DMatrix<f64>>,
    pre_activations: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().expect("cache holds at least the input")
    }
}

impl MlpParams {
    /// Builds a network with uniform fan-in initialization. When
    /// `final_scale` is given the last layer is drawn from
    /// `U(-final_scale, final_scale)` instead.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        final_scale: Option<f64>,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "a network needs input and output sizes");
        let n_layers = sizes.len() - 1;
        let layers = (0..n_layers)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let last = i + 1 == n_layers;
                let bound = match (last, final_scale) {
                    (true, Some(s)) => s,
                    _ => 1.0 / (fan_in as f64).sqrt(),
                };
                Layer {
                    weight: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..=bound)),
                    bias: DVector::from_fn(fan_out, |_, _| rng.random_range(-bound..=bound)),
                    activation: if last { output } else { hidden },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ArchitectureMismatch);
        }
        for l in &layers {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::ArchitectureMismatch);
            }
        }
        for w in layers.windows(2) {
            if w[1].weight.ncols() != w[0].weight.nrows() {
                return Err(Error::ArchitectureMismatch);
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.activation == b.activation)
    }

    pub fn params_iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter())
            .chain(self.layers.iter().flat_map(|l| l.bias.iter()))
    }

    pub fn params_iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        let (w, b): (Vec<_>, Vec<_>) = self.layers.iter_mut().map(|l| (&mut l.weight, &mut l.bias)).unzip();
        w.into_iter()
            .flat_map(|m| m.iter_mut())
            .chain(b.into_iter().flat_map(|v| v.iter_mut()))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut h = DVector::from_column_slice(x);
        for l in &self.layers {
            let mut z = &l.weight * &h + &l.bias;
            z.apply(|v| *v = l.activation.apply(*v));
            h = z;
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output"));
        }
        Ok(h.as_slice().to_vec())
    }

    /// Forward pass over the columns of `x`.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = x.clone();
        for l in &self.layers {
            h = Self::affine(l, &h);
            h.apply(|v| *v = l.activation.apply(*v));
        }
        h
    }

    fn affine(l: &Layer, h: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &l.weight * h;
        for mut col in z.column_iter_mut() {
            col += &l.bias;
        }
        z
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> ForwardCache {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        for l in &self.layers {
            let z = Self::affine(l, activations.last().unwrap());
            let a = z.map(|v| l.activation.apply(v));
            pre_activations.push(z);
            activations.push(a);
        }
        ForwardCache {
            activations,
            pre_activations,
        }
    }

    /// Gradients of `Σ_columns upstreamᵀ · output` with respect to every
    /// parameter and to the inputs.
    pub fn backward_batch(&self, cache: &ForwardCache, upstream: &DMatrix<f64>) -> (MlpGrads, DMatrix<f64>) {
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut delta = upstream.clone();
        for i in (0..n).rev() {
            let l = &self.layers[i];
            let pre = &cache.pre_activations[i];
            let out = &cache.activations[i + 1];
            delta.zip_zip_apply(pre, out, |d, p, o| *d *= l.activation.derivative(p, o));
            weights.push(&delta * cache.activations[i].transpose());
            biases.push(delta.column_sum());
            delta = l.weight.transpose() * &delta;
        }
        weights.reverse();
        biases.reverse();
        (MlpGrads { weights, biases }, delta)
    }

    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let cache = self.forward_cached(&DMatrix::from_column_slice(x.len(), 1, x));
        if cache.output().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output"));
        }
        let up = DMatrix::from_column_slice(upstream.len(), 1, upstream);
        let (g, dx) = self.backward_batch(&cache, &up);
        Ok((g, dx.as_slice().to_vec()))
    }

    pub fn is_finite(&self) -> bool {
        self.params_iter().all(|v| v.is_finite())
    }
}

/// Adaptive-moment optimizer state for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: MlpGrads,
    pub second_moment: MlpGrads,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(net: &MlpParams, lr: f64) -> Self {
        Self {
            first_moment: MlpGrads::zeros_like(net),
            second_moment: MlpGrads::zeros_like(net),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam step descending along `grads`.
///
/// Non-finite gradients leave both the network and the optimizer untouched.
pub fn adam_step(net: &mut MlpParams, grads: &MlpGrads, opt: &mut OptimizerState) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = (opt.beta1, opt.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, eps) = (opt.lr, opt.epsilon);

    let params = net.params_iter_mut();
    let g = grads.iter();
    let m = opt.first_moment.iter_mut();
    let v = opt.second_moment.iter_mut();
    for (((p, g), m), v) in params.zip(g).zip(m).zip(v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// `target ← (1-τ)·target + τ·source`.
pub fn soft_update(target: &mut MlpParams, source: &MlpParams, tau: f64) -> Result<()> {
    if !target.same_shape(source) {
        return Err(Error::ArchitectureMismatch);
    }
    for (t, s) in target.params_iter_mut().zip(source.params_iter()) {
        *t = (1.0 - tau) * *t + tau * s;
    }
    Ok(())
}
