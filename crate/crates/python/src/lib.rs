//! Python bindings: configs, runs, comparisons, sweeps, the toy demo and the
//! metric suite.

use std::path::PathBuf;

use orthocl_core::cli::config::RunConfig;
use orthocl_core::cli::report::RunReport;
use orthocl_core::cli::toy::{run_toy, PairConfig};
use orthocl_core::cli::{cmd_compare, cmd_run, cmd_sweep};
use orthocl_core::linalg::RngStream;
use orthocl_core::metrics::{self, gpwc_identity_check};
use orthocl_core::tasks::{gen_quadratic_pair, QuadraticPair};
use orthocl_core::{Error, PerfMatrix as CorePerfMatrix, RegWeights, StrategyName};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;
use serde::Serialize;
use serde_json::Value;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.root() {
        Error::Numeric(_) => PyArithmeticError::new_err(msg),
        Error::Io(_) => PyOSError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_bound_py_any(py)?,
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_bound_py_any(py)?,
            (None, Some(u)) => u.into_bound_py_any(py)?,
            _ => n.as_f64().unwrap_or(f64::NAN).into_bound_py_any(py)?,
        },
        Value::String(s) => s.into_bound_py_any(py)?,
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn parse_name(name: &str) -> PyResult<StrategyName> {
    name.parse().map_err(py_err)
}

/// A validated run configuration.
#[pyclass(name = "Config", module = "orthocl", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses TOML, or JSON when the text starts with `{`.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        RunConfig::parse(text).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RunConfig::load(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn strategy(&self) -> String {
        self.inner.strategy().name.to_string()
    }

    #[getter]
    fn lambda1(&self) -> f64 {
        self.inner.reg.lambda1
    }

    #[getter]
    fn lambda2(&self) -> f64 {
        self.inner.reg.lambda2
    }

    fn with_seed(&self, seed: u64) -> Self {
        let mut inner = self.inner.clone();
        inner.seed = seed;
        Self { inner }
    }

    fn with_strategy(&self, name: &str) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        inner.strategy.name = parse_name(name)?;
        Ok(Self { inner })
    }

    fn with_reg(&self, lambda1: f64, lambda2: f64) -> PyResult<Self> {
        let reg = RegWeights { lambda1, lambda2 };
        reg.validate().map_err(py_err)?;
        let mut inner = self.inner.clone();
        inner.reg = reg;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("config serializes")
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, strategy={:?})", self.inner.seed, self.strategy())
    }
}

/// Result of one run.
#[pyclass(name = "Report", module = "orthocl", from_py_object)]
#[derive(Clone)]
pub struct PyReport {
    inner: RunReport,
}

#[pymethods]
impl PyReport {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        RunReport::read(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    #[getter]
    fn strategy(&self) -> String {
        self.inner.strategy.clone()
    }

    #[getter]
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.metrics)
    }

    #[getter]
    fn perf_matrix(&self) -> PyPerfMatrix {
        PyPerfMatrix {
            inner: self.inner.perf_matrix.clone(),
        }
    }

    #[getter]
    fn counters<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.counters)
    }

    #[getter]
    fn trace<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.trace)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config.clone(),
        }
    }

    /// Metrics and score matrix as pretty JSON; stable across identical runs.
    fn metric_block(&self) -> String {
        self.inner.metric_block()
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.clone().write(&path).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let m = &self.inner.metrics;
        format!(
            "Report(strategy={:?}, n={}, last={:?}, bwt={:?})",
            self.inner.strategy, m.n, m.last, m.bwt
        )
    }
}

/// Score matrix `R[t][j]` with 1-based indices.
#[pyclass(name = "PerfMatrix", module = "orthocl", from_py_object)]
#[derive(Clone)]
pub struct PyPerfMatrix {
    inner: CorePerfMatrix,
}

#[pymethods]
impl PyPerfMatrix {
    #[new]
    fn new(n: usize) -> Self {
        Self {
            inner: CorePerfMatrix::new(n),
        }
    }

    #[staticmethod]
    fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        CorePerfMatrix::from_rows(rows).map(|inner| Self { inner }).map_err(py_err)
    }

    /// Lower-triangular rows: row `t` holds scores on tasks `1..=t`.
    #[staticmethod]
    fn from_lower(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        CorePerfMatrix::from_lower(rows).map(|inner| Self { inner }).map_err(py_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    fn set(&mut self, t: usize, j: usize, score: f64) -> PyResult<()> {
        self.inner.set(t, j, score).map_err(py_err)
    }

    fn get(&self, t: usize, j: usize) -> Option<f64> {
        self.inner.get(t, j)
    }

    fn rows(&self) -> Vec<Vec<Option<f64>>> {
        self.inner.rows().to_vec()
    }

    fn last(&self) -> PyResult<f64> {
        metrics::last(&self.inner).map_err(py_err)
    }

    fn avg(&self) -> PyResult<f64> {
        metrics::avg(&self.inner).map_err(py_err)
    }

    fn avg_all(&self) -> PyResult<f64> {
        metrics::avg_all(&self.inner).map_err(py_err)
    }

    fn imd(&self) -> PyResult<Vec<f64>> {
        metrics::imd(&self.inner).map_err(py_err)
    }

    fn bwt(&self) -> PyResult<f64> {
        metrics::bwt(&self.inner).map_err(py_err)
    }

    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &metrics::MetricSummary::from_matrix(&self.inner))
    }

    fn __repr__(&self) -> String {
        format!("PerfMatrix(n={})", self.inner.n())
    }
}

#[pyfunction]
fn strategy_names() -> Vec<&'static str> {
    StrategyName::ALL.iter().map(|n| n.as_str()).collect()
}

/// Trains the configured strategy; releases the GIL while training.
#[pyfunction]
fn run(py: Python<'_>, config: &PyConfig) -> PyResult<PyReport> {
    let cfg = config.inner.clone();
    py.detach(|| cmd_run(&cfg))
        .map(|inner| PyReport { inner })
        .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (config, strategies, jobs = 1))]
fn compare(py: Python<'_>, config: &PyConfig, strategies: Vec<String>, jobs: usize) -> PyResult<Vec<PyReport>> {
    let names = strategies.iter().map(|s| parse_name(s)).collect::<PyResult<Vec<_>>>()?;
    let cfg = config.inner.clone();
    let reports = py.detach(|| cmd_compare(&cfg, &names, jobs)).map_err(py_err)?;
    Ok(reports.into_iter().map(|inner| PyReport { inner }).collect())
}

/// One metric row per `(lambda1, lambda2)` pair, lambda1-major.
#[pyfunction]
#[pyo3(signature = (config, lambda1, lambda2, jobs = 1))]
fn sweep<'py>(
    py: Python<'py>,
    config: &PyConfig,
    lambda1: Vec<f64>,
    lambda2: Vec<f64>,
    jobs: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.inner.clone();
    let points = py.detach(|| cmd_sweep(&cfg, &lambda1, &lambda2, jobs)).map_err(py_err)?;
    to_py(py, &points)
}

#[derive(Serialize)]
struct ToyOut<'a> {
    identity: &'a metrics::IdentityCheck,
    trajectories: Vec<(&'static str, &'a [orthocl_core::cli::toy::TrajectoryPoint])>,
    excess: Vec<(&'static str, [f64; 2])>,
}

/// The isotropic two-task regression demo.
#[pyfunction]
#[pyo3(signature = (lambda1 = 0.5, seed = 0))]
fn toy<'py>(py: Python<'py>, lambda1: f64, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let cfg = PairConfig {
        lambda1,
        seed,
        ..PairConfig::default()
    };
    let out = run_toy(&cfg).map_err(py_err)?;
    to_py(
        py,
        &ToyOut {
            identity: &out.identity,
            trajectories: vec![
                ("seq-ft", &out.seq_ft.trajectory),
                ("hifgo-proxy", &out.hifgo.trajectory),
            ],
            excess: vec![
                ("seq-ft", [out.seq_ft.excess_a, out.seq_ft.excess_b]),
                ("hifgo-proxy", [out.hifgo.excess_a, out.hifgo.excess_b]),
            ],
        },
    )
}

/// Population-form check of the snapshot identity on a random quadratic pair.
#[pyfunction]
#[pyo3(signature = (dim, pair_seed, samples = 100))]
fn gpwc_identity<'py>(py: Python<'py>, dim: usize, pair_seed: u64, samples: usize) -> PyResult<Bound<'py, PyAny>> {
    let mut rng = RngStream::new(pair_seed, 0x5041_4952);
    let pair = QuadraticPair::random(dim, samples, 0.0, &mut rng);
    let stream = gen_quadratic_pair(&pair, pair_seed).map_err(py_err)?;
    to_py(py, &gpwc_identity_check(&stream).map_err(py_err)?)
}

#[pymodule]
pub fn orthocl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyReport>()?;
    m.add_class::<PyPerfMatrix>()?;
    m.add_function(wrap_pyfunction!(strategy_names, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(toy, m)?)?;
    m.add_function(wrap_pyfunction!(gpwc_identity, m)?)?;
    Ok(())
}
