//! Python bindings: GP experts, the four pooling rules, metrics, synthetic
//! data, and the benchmark harness (configs and reports travel as JSON).

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

use gpexperts::combine::{self, DlopConfig, Rule, WeightVector};
use gpexperts::{data, harness, metrics, Error, ExpertPrediction, HyperParams, KernelSpec, OptConfig};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("all rows must have the same length"));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

type Moments = (f64, f64, f64);

fn preds(items: &[Moments]) -> Vec<ExpertPrediction> {
    items
        .iter()
        .map(|&(mean, variance, prior_variance)| ExpertPrediction { mean, variance, prior_variance })
        .collect()
}

fn parse_rule(name: &str) -> PyResult<Rule> {
    name.parse().map_err(to_py)
}

/// An exact GP regressor on one data subset.
#[pyclass(name = "GPModel", module = "gpexperts_py")]
struct PyGpModel {
    inner: gpexperts::GpModel,
}

#[pymethods]
impl PyGpModel {
    /// Fit on `x` (rows of inputs) and `y`. Hyperparameters are either the
    /// flat log vector `hypers`, or uniform values from the keyword
    /// arguments; `optimize=True` then maximizes the marginal likelihood.
    #[new]
    #[pyo3(signature = (x, y, kernel = "seard", hypers = None, lengthscale = 1.0, signal_variance = 1.0, noise_variance = 0.1, optimize = false, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        py: Python<'_>,
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
        kernel: &str,
        hypers: Option<Vec<f64>>,
        lengthscale: f64,
        signal_variance: f64,
        noise_variance: f64,
        optimize: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let x = matrix(&x)?;
        let y = DVector::from_vec(y);
        let spec = KernelSpec::parse(kernel, x.ncols()).map_err(to_py)?;
        let mut params = match hypers {
            Some(h) => HyperParams::from_slice(&spec, &h).map_err(to_py)?,
            None => HyperParams::uniform(&spec, lengthscale, signal_variance, noise_variance),
        };
        let inner = py.detach(|| {
            if optimize {
                let cfg = OptConfig { seed, ..Default::default() };
                params = gpexperts::optimize_hypers(&x, &y, &spec, &params, &cfg)?;
            }
            gpexperts::fit(&x, &y, &spec, &params)
        });
        Ok(Self { inner: inner.map_err(to_py)? })
    }

    /// `(mean, variance, prior_variance)` per test row; variances include noise.
    fn predict(&self, py: Python<'_>, xstar: Vec<Vec<f64>>) -> PyResult<Vec<Moments>> {
        let xs = matrix(&xstar)?;
        let out = py.detach(|| self.inner.predict(&xs)).map_err(to_py)?;
        Ok(out.iter().map(|p| (p.mean, p.variance, p.prior_variance)).collect())
    }

    fn log_marginal_likelihood(&self) -> f64 {
        self.inner.log_marginal_likelihood()
    }

    fn lml_grad(&self) -> Vec<f64> {
        self.inner.lml_grad()
    }

    #[getter]
    fn hypers(&self) -> Vec<f64> {
        self.inner.params().to_vec()
    }

    #[getter]
    fn kernel(&self) -> String {
        self.inner.spec().name()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!("GPModel(kernel={:?}, n={})", self.inner.spec().name(), self.inner.n())
    }
}

/// Pool `(mean, variance, prior_variance)` expert moments with `rule`.
/// Returns `(mean, variance, weights)`; weights is None for BCM.
#[pyfunction]
#[pyo3(signature = (rule, experts, lam = 1.0, steps = 1))]
fn combine_predictions(
    rule: &str,
    experts: Vec<Moments>,
    lam: f64,
    steps: usize,
) -> PyResult<(f64, f64, Option<Vec<f64>>)> {
    let rule = parse_rule(rule)?;
    let c = combine::combine(rule, &preds(&experts), &DlopConfig { lambda: lam, steps }).map_err(to_py)?;
    Ok((c.mean, c.variance, c.weights.map(WeightVector::into_inner)))
}

#[pyfunction]
fn gaussian_kl(p: (f64, f64), q: (f64, f64)) -> PyResult<f64> {
    combine::gaussian_kl(p, q).map_err(to_py)
}

#[pyfunction]
fn sym_kl_matrix(experts: Vec<Moments>) -> Vec<Vec<f64>> {
    rows(combine::sym_kl_matrix(&preds(&experts)).matrix())
}

#[pyfunction]
fn entropy_change_weights(experts: Vec<Moments>) -> Vec<f64> {
    combine::entropy_change_weights(&preds(&experts)).into_inner()
}

#[pyfunction]
#[pyo3(signature = (experts, weights, lam = 1.0))]
fn dlop_weights(experts: Vec<Moments>, weights: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    if weights.len() != experts.len() {
        return Err(PyValueError::new_err("one weight per expert is required"));
    }
    Ok(combine::dlop_weights(&preds(&experts), &WeightVector::new(weights), lam).into_inner())
}

#[pyfunction]
fn smse(means: Vec<f64>, y_test: Vec<f64>, y_train_mean: f64, y_train_var: f64) -> PyResult<f64> {
    metrics::smse(&means, &y_test, y_train_mean, y_train_var).map_err(to_py)
}

/// `moments` are `(mean, variance)` pairs.
#[pyfunction]
fn snlp(moments: Vec<(f64, f64)>, y_test: Vec<f64>, y_train_mean: f64, y_train_var: f64) -> PyResult<f64> {
    metrics::snlp_moments(&moments, &y_test, y_train_mean, y_train_var).map_err(to_py)
}

/// Returns `(x_rows, y)`.
#[pyfunction]
#[pyo3(signature = (n, d, kernel = "seard", lengthscale = 1.0, signal_variance = 1.0, noise_variance = 0.1, heteroscedastic = false, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn synthetic_gp_data(
    py: Python<'_>,
    n: usize,
    d: usize,
    kernel: &str,
    lengthscale: f64,
    signal_variance: f64,
    noise_variance: f64,
    heteroscedastic: bool,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let spec = KernelSpec::parse(kernel, d).map_err(to_py)?;
    let params = HyperParams::uniform(&spec, lengthscale, signal_variance, noise_variance);
    let ds = py
        .detach(|| data::synthetic_gp_data(n, d, &spec, &params, heteroscedastic, seed))
        .map_err(to_py)?;
    Ok((rows(&ds.x), ds.y.iter().copied().collect()))
}

fn parse_config(config_json: &str) -> PyResult<harness::RunConfig> {
    let cfg: harness::RunConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(format!("bad config: {e}")))?;
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Run one benchmark from a JSON config; returns the JSON report.
#[pyfunction]
fn run_benchmark(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    let report = py.detach(|| harness::run_benchmark(&cfg)).map_err(to_py)?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Run seeds `seed..seed + n_seeds`; returns the JSON aggregate report.
#[pyfunction]
fn run_repeated(py: Python<'_>, config_json: &str, n_seeds: usize) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    let report = py.detach(|| harness::run_repeated(&cfg, n_seeds)).map_err(to_py)?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn gpexperts_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGpModel>()?;
    m.add_function(wrap_pyfunction!(combine_predictions, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_kl, m)?)?;
    m.add_function(wrap_pyfunction!(sym_kl_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_change_weights, m)?)?;
    m.add_function(wrap_pyfunction!(dlop_weights, m)?)?;
    m.add_function(wrap_pyfunction!(smse, m)?)?;
    m.add_function(wrap_pyfunction!(snlp, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_gp_data, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(run_repeated, m)?)?;
    m.add("RULES", Rule::ALL.iter().map(|r| r.name()).collect::<Vec<_>>())?;
    Ok(())
}
