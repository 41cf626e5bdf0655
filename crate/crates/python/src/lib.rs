//! Python bindings for the decoupled GP regression engine.
//!
//! Inputs are row-major sequences (`list[list[float]]` or a 2-D numpy
//! array); results come back as plain Python lists.

use dgp::cli::{self, ModelSnapshot};
use dgp::kernels::{self, KernelHyper};
use dgp::model::{self, DecoupledModel};
use dgp::oracles;
use dgp::trainer::{self, Dataset, KlColumns, Normalization, TrainConfig};
use dgp::DgpError;
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: DgpError) -> PyErr {
    match e {
        DgpError::Io(_) => PyIOError::new_err(e.to_string()),
        DgpError::Factorization(_) | DgpError::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if let Some(i) = rows.iter().position(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!("row {i} has {} columns, expected {d}", rows[i].len())));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

fn normalized(x: DMatrix<f64>, norm: Option<&Normalization>) -> PyResult<DMatrix<f64>> {
    let Some(n) = norm else { return Ok(x) };
    if x.ncols() != n.input_mean.len() {
        return Err(PyValueError::new_err(format!(
            "queries have {} columns, model expects {}",
            x.ncols(),
            n.input_mean.len()
        )));
    }
    Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - n.input_mean[j]) / n.input_std[j]))
}

/// Squared-exponential ARD kernel hyperparameters.
#[pyclass(name = "KernelHyper", module = "dgp_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyKernelHyper {
    inner: KernelHyper,
}

#[pymethods]
impl PyKernelHyper {
    #[new]
    fn new(amplitude: f64, lengthscales: Vec<f64>) -> PyResult<Self> {
        let inner = KernelHyper::new(amplitude, &lengthscales).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn amplitude(&self) -> f64 {
        self.inner.amplitude()
    }

    #[getter]
    fn lengthscales(&self) -> Vec<f64> {
        self.inner.lengthscales()
    }

    /// `k(x, x')` for a single pair of points.
    fn cov(&self, x: Vec<f64>, x2: Vec<f64>) -> PyResult<f64> {
        kernels::se_ard_cov(&x, &x2, &self.inner).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("KernelHyper(amplitude={}, lengthscales={:?})", self.amplitude(), self.lengthscales())
    }
}

/// A trained decoupled posterior. Holds the input normalization, if any,
/// so queries are given in the original units.
#[pyclass(name = "Model", module = "dgp_py", frozen)]
struct PyModel {
    inner: DecoupledModel,
    normalization: Option<Normalization>,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn m_alpha(&self) -> usize {
        self.inner.m_alpha()
    }

    #[getter]
    fn m_beta(&self) -> usize {
        self.inner.m_beta()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn noise_variance(&self) -> f64 {
        self.inner.noise_variance()
    }

    #[getter]
    fn hyper(&self) -> PyKernelHyper {
        PyKernelHyper {
            inner: self.inner.hyper.clone(),
        }
    }

    /// Predictive `(mean, variance)` of the latent function.
    fn predict(&self, py: Python<'_>, queries: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let q = normalized(matrix(&queries)?, self.normalization.as_ref())?;
        let m = py.detach(|| model::predict(&self.inner, &q)).map_err(to_py)?;
        Ok((m.mean.iter().copied().collect(), m.variance.iter().copied().collect()))
    }

    /// KL divergence from the posterior to the GP prior.
    fn kl(&self) -> PyResult<f64> {
        model::kl_normal_prior(&self.inner).map_err(to_py)
    }

    /// Lower bound on the data in `(inputs, targets)`; with `n_total` the
    /// likelihood term is rescaled as for a minibatch.
    #[pyo3(signature = (inputs, targets, n_total = None))]
    fn elbo(&self, inputs: Vec<Vec<f64>>, targets: Vec<f64>, n_total: Option<usize>) -> PyResult<f64> {
        let x = normalized(matrix(&inputs)?, self.normalization.as_ref())?;
        let n = n_total.unwrap_or(targets.len());
        model::elbo(&self.inner, &x, &DVector::from_vec(targets), n).map_err(to_py)
    }

    /// All trainable parameters in a flat vector.
    fn to_flat(&self) -> Vec<f64> {
        self.inner.to_flat()
    }

    fn to_json(&self) -> PyResult<String> {
        let snap = ModelSnapshot::new(&self.inner, self.normalization.clone());
        serde_json::to_string(&snap).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let snap: ModelSnapshot = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            inner: snap.to_model().map_err(to_py)?,
            normalization: snap.normalization,
        })
    }

    fn __repr__(&self) -> String {
        format!("Model(m_alpha={}, m_beta={}, dim={})", self.m_alpha(), self.m_beta(), self.dim())
    }
}

/// Fit a decoupled model by stochastic ascent on the lower bound.
///
/// Returns the model and the per-iteration minibatch bound estimates.
#[pyfunction]
#[pyo3(signature = (
    inputs, targets, *, m_alpha = 100, m_beta = 10, batch_size = 64, increment = 8,
    iterations = 1000, gamma0 = 0.01, seed = 0, kl_columns = None, shared_bases = false,
    normalize = false,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    m_alpha: usize,
    m_beta: usize,
    batch_size: usize,
    increment: usize,
    iterations: usize,
    gamma0: f64,
    seed: u64,
    kl_columns: Option<usize>,
    shared_bases: bool,
    normalize: bool,
) -> PyResult<(PyModel, Vec<f64>)> {
    let mut data = Dataset::new(matrix(&inputs)?, DVector::from_vec(targets)).map_err(to_py)?;
    if normalize {
        data.normalize_inputs();
    }
    let config = TrainConfig {
        m_alpha_cap: m_alpha,
        m_beta_cap: m_beta,
        batch_size,
        increment,
        iterations,
        gamma0,
        seed,
        kl_columns: kl_columns.map_or(KlColumns::Exact, KlColumns::Sampled),
        shared_bases,
        ..TrainConfig::default()
    };
    let (inner, trace) = py.detach(|| trainer::train(&data, &config)).map_err(to_py)?;
    let model = PyModel {
        inner,
        normalization: data.normalization,
    };
    Ok((model, trace.iter().map(|t| t.elbo).collect()))
}

/// Exact GP posterior `(mean, variance)` at `queries`; `O(N³)`.
#[pyfunction]
fn exact_gpr(
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    hyper: &PyKernelHyper,
    noise_variance: f64,
    queries: Vec<Vec<f64>>,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if !(noise_variance > 0.0) {
        return Err(PyValueError::new_err("noise_variance must be positive"));
    }
    let m = oracles::exact_gpr(
        &matrix(&inputs)?,
        &DVector::from_vec(targets),
        &hyper.inner,
        noise_variance.ln(),
        &matrix(&queries)?,
    )
    .map_err(to_py)?;
    Ok((m.mean.iter().copied().collect(), m.variance.iter().copied().collect()))
}

/// Exact log marginal likelihood `log p(y)`.
#[pyfunction]
fn log_marginal(inputs: Vec<Vec<f64>>, targets: Vec<f64>, hyper: &PyKernelHyper, noise_variance: f64) -> PyResult<f64> {
    if !(noise_variance > 0.0) {
        return Err(PyValueError::new_err("noise_variance must be positive"));
    }
    oracles::log_marginal(&matrix(&inputs)?, &DVector::from_vec(targets), &hyper.inner, noise_variance.ln())
        .map_err(to_py)
}

/// Noisy samples of `sin(πx)/(πx)` on `[-5, 5]`.
#[pyfunction]
#[pyo3(signature = (n, noise_sd = 0.1, seed = 0))]
fn sinc_dataset(n: usize, noise_sd: f64, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let d = cli::sinc_dataset(n, noise_sd, seed).map_err(to_py)?;
    let x = d.inputs.row_iter().map(|r| r.iter().copied().collect()).collect();
    Ok((x, d.targets.iter().copied().collect()))
}

/// Mean squared error divided by the population variance of `targets`.
#[pyfunction]
fn nmse(predicted: Vec<f64>, targets: Vec<f64>) -> PyResult<f64> {
    cli::nmse(&DVector::from_vec(predicted), &DVector::from_vec(targets)).map_err(to_py)
}

#[pymodule]
pub fn dgp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKernelHyper>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(exact_gpr, m)?)?;
    m.add_function(wrap_pyfunction!(log_marginal, m)?)?;
    m.add_function(wrap_pyfunction!(sinc_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(nmse, m)?)?;
    Ok(())
}
