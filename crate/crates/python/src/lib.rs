//! Python bindings: GP regression and sparsification, confidence bounds,
//! the pendulum and the training harness.

use std::collections::HashMap;
use std::path::Path;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use sgddpg_core::agent::{filter_measurement as filter_fn, storage_filter as storage_fn};
use sgddpg_core::checkpoint::Checkpoint;
use sgddpg_core::confidence::{self, BetaConfig};
use sgddpg_core::env::{Environment, Pendulum, PendulumParams, PendulumState};
use sgddpg_core::gp::sparsify::{self, DEFAULT_QR_THRESHOLD};
use sgddpg_core::gp::{self, GpDataset, KernelHyperparams, PosteriorStats};
use sgddpg_core::harness::{self, stream_rng, Stream, TrainConfig};
use sgddpg_core::selftest::{run_selftest, SelftestOptions};
use sgddpg_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::Training { .. } | Error::Factorization { .. } | Error::NonFinite(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (v.to_string(),))
}

#[pyclass(name = "KernelHyperparams", module = "sgddpg", from_py_object)]
#[derive(Clone)]
struct PyHyperparams {
    inner: KernelHyperparams,
}

#[pymethods]
impl PyHyperparams {
    #[new]
    fn new(signal_variance: f64, lengthscales: Vec<f64>, noise_std: f64) -> PyResult<Self> {
        let inner = KernelHyperparams::new(signal_variance, lengthscales, noise_std).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn signal_variance(&self) -> f64 {
        self.inner.signal_variance
    }

    #[getter]
    fn lengthscales(&self) -> Vec<f64> {
        self.inner.lengthscales.clone()
    }

    #[getter]
    fn noise_std(&self) -> f64 {
        self.inner.noise_std
    }

    /// Squared-exponential kernel value between two inputs.
    fn kernel(&self, a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
        gp::kernel_eval(&a, &b, &self.inner).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "KernelHyperparams(signal_variance={}, lengthscales={:?}, noise_std={})",
            self.inner.signal_variance, self.inner.lengthscales, self.inner.noise_std
        )
    }
}

#[pyclass(name = "GpDataset", module = "sgddpg", from_py_object)]
#[derive(Clone)]
struct PyGpDataset {
    inner: GpDataset,
}

#[pymethods]
impl PyGpDataset {
    #[new]
    #[pyo3(signature = (capacity = 2000))]
    fn new(capacity: usize) -> Self {
        Self {
            inner: GpDataset::new(capacity),
        }
    }

    fn push(&mut self, z: Vec<f64>, y: f64) -> PyResult<()> {
        self.inner.push(z, y).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn inputs(&self) -> Vec<Vec<f64>> {
        self.inner.inputs.clone()
    }

    #[getter]
    fn targets(&self) -> Vec<f64> {
        self.inner.targets.clone()
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.inner.capacity
    }

    /// `(mean, variance)` of the latent function at `z`.
    fn posterior(&self, hp: &PyHyperparams, z: Vec<f64>) -> PyResult<(f64, f64)> {
        let p = gp::posterior(&self.inner, &hp.inner, &z).map_err(py_err)?;
        Ok((p.mean, p.variance))
    }

    /// `(∇mean, ∇variance)` with respect to `z`.
    fn posterior_grad(&self, hp: &PyHyperparams, z: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        gp::posterior_grad(&self.inner, &hp.inner, &z).map_err(py_err)
    }

    fn log_marginal_likelihood(&self, hp: &PyHyperparams) -> PyResult<f64> {
        gp::log_marginal_likelihood(&self.inner, &hp.inner).map_err(py_err)
    }

    fn fit_hyperparams(&self, hp: &PyHyperparams, steps: usize) -> PyResult<PyHyperparams> {
        let inner = gp::fit_hyperparams(&self.inner, &hp.inner, steps).map_err(py_err)?;
        Ok(PyHyperparams { inner })
    }

    fn independence_scores(&self, hp: &PyHyperparams) -> PyResult<Vec<f64>> {
        Ok(sparsify::independence_scores(&self.inner, &hp.inner)
            .map_err(py_err)?
            .scores)
    }

    fn evict_to_capacity(&self, hp: &PyHyperparams) -> PyGpDataset {
        PyGpDataset {
            inner: sparsify::evict_to_capacity(&self.inner, &hp.inner),
        }
    }

    #[pyo3(signature = (hp, threshold = DEFAULT_QR_THRESHOLD))]
    fn remove_correlated(&self, hp: &PyHyperparams, threshold: f64) -> PyGpDataset {
        PyGpDataset {
            inner: sparsify::remove_correlated(&self.inner, &hp.inner, threshold),
        }
    }

    fn info_capacity(&self, hp: &PyHyperparams) -> PyResult<f64> {
        confidence::info_capacity(&self.inner, &hp.inner).map_err(py_err)
    }

    #[pyo3(signature = (hp, delta = 0.1, rkhs_floor = 1.0))]
    fn online_beta(&self, hp: &PyHyperparams, delta: f64, rkhs_floor: f64) -> PyResult<f64> {
        let cfg = BetaConfig {
            rkhs_floor,
            ..BetaConfig::online(delta)
        };
        confidence::beta(&cfg, &self.inner, &hp.inner).map_err(py_err)
    }
}

/// `(lower, upper)` of the band `mean ± beta·sqrt(variance)`.
#[pyfunction]
fn confidence_bounds(mean: f64, variance: f64, beta: f64) -> (f64, f64) {
    let b = confidence::bounds(PosteriorStats { mean, variance }, beta);
    (b.lower, b.upper)
}

#[pyfunction]
fn filter_measurement(g_hat: f64, cost: f64, sigma: f64) -> bool {
    filter_fn(g_hat, cost, sigma)
}

#[pyfunction]
fn storage_filter(g_hat: f64, sigma: f64) -> bool {
    storage_fn(g_hat, sigma)
}

#[pyclass(name = "Pendulum", module = "sgddpg")]
struct PyPendulum {
    inner: Pendulum,
    rng: rand_chacha::ChaCha8Rng,
}

#[pymethods]
impl PyPendulum {
    #[new]
    #[pyo3(signature = (seed = 0, reset_theta = None, reset_theta_dot = None))]
    fn new(seed: u64, reset_theta: Option<f64>, reset_theta_dot: Option<f64>) -> Self {
        let d = PendulumParams::default();
        let params = PendulumParams {
            reset_theta: reset_theta.unwrap_or(d.reset_theta),
            reset_theta_dot: reset_theta_dot.unwrap_or(d.reset_theta_dot),
            ..d
        };
        Self {
            inner: Pendulum::new(params),
            rng: stream_rng(seed, Stream::Env),
        }
    }

    fn reset(&mut self) -> Vec<f64> {
        self.inner.reset(&mut self.rng)
    }

    /// Returns `(next_state, reward, cost, catastrophes)`.
    fn step(&mut self, torque: f64) -> PyResult<(Vec<f64>, f64, f64, usize)> {
        let s = self.inner.step(&[torque]).map_err(py_err)?;
        Ok((s.next_state, s.reward, s.cost, s.catastrophes))
    }

    #[getter]
    fn state(&self) -> Vec<f64> {
        self.inner.state().to_vec()
    }

    #[setter]
    fn set_state(&mut self, s: Vec<f64>) -> PyResult<()> {
        self.inner.set_state(PendulumState::from_slice(&s).map_err(py_err)?);
        Ok(())
    }
}

/// Trains with the given JSON config (flat dotted keys) and string
/// overrides; returns the run summary with the metrics CSV attached.
#[pyfunction]
#[pyo3(signature = (config = None, overrides = None))]
fn train<'py>(
    py: Python<'py>,
    config: Option<&str>,
    overrides: Option<HashMap<String, String>>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = match config {
        Some(text) => TrainConfig::from_json_str(text).map_err(py_err)?,
        None => TrainConfig::default(),
    };
    let mut keys: Vec<_> = overrides.unwrap_or_default().into_iter().collect();
    keys.sort();
    for (k, v) in keys {
        cfg.set_str(&k, &v).map_err(py_err)?;
    }
    cfg.validate().map_err(py_err)?;
    let records = py.detach(|| harness::train(cfg.clone())).map_err(py_err)?;
    let mut summary = harness::run_summary(&cfg, &records);
    summary["metrics_csv"] = serde_json::Value::String(harness::metrics_csv(&records));
    json_to_py(py, &summary)
}

/// Noise-free evaluation of a saved checkpoint.
#[pyfunction]
#[pyo3(signature = (checkpoint, episodes = 5, seed = 0))]
fn evaluate<'py>(py: Python<'py>, checkpoint: &str, episodes: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let ckpt = Checkpoint::load(Path::new(checkpoint)).map_err(py_err)?;
    let cfg = TrainConfig::from_json_str(&ckpt.config.to_string()).map_err(py_err)?;
    let mut env = Pendulum::new(cfg.pendulum);
    let res = harness::evaluate(&ckpt.nets, &mut env, episodes, &mut stream_rng(seed, Stream::Eval)).map_err(py_err)?;
    let v = serde_json::json!({"mean_return": res.mean_return, "catastrophes": res.catastrophes, "episodes": episodes});
    json_to_py(py, &v)
}

/// Runs the numerical self-test; returns `(name, passed, value, tolerance)` rows.
#[pyfunction]
#[pyo3(signature = (trials = 200, seed = 0))]
fn gp_selftest(trials: usize, seed: u64) -> PyResult<Vec<(String, bool, f64, f64)>> {
    let opts = SelftestOptions {
        trials,
        seed,
        inject_fault: false,
    };
    let rows = run_selftest(&opts).map_err(py_err)?;
    Ok(rows
        .into_iter()
        .map(|c| (c.name.to_string(), c.passed, c.value, c.tolerance))
        .collect())
}

#[pymodule]
fn sgddpg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHyperparams>()?;
    m.add_class::<PyGpDataset>()?;
    m.add_class::<PyPendulum>()?;
    m.add_function(wrap_pyfunction!(confidence_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(filter_measurement, m)?)?;
    m.add_function(wrap_pyfunction!(storage_filter, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gp_selftest, m)?)?;
    Ok(())
}
