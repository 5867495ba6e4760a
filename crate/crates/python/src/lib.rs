use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;

use hdg_core::coupling::{couple_fields, CouplingContext};
use hdg_core::extremes;
use hdg_core::harness::{self, seed_stream, ExperimentConfig, RunOptions};
use hdg_core::model;
use hdg_core::rg::PotentialTable;
use hdg_core::sampler::{dg_exact_small, sample_dg, sample_gff, KernelContext};

fn err(e: hdg_core::Error) -> PyErr {
    match e {
        hdg_core::Error::InvalidParameter { .. } | hdg_core::Error::Regime(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Converts any serializable value into plain Python objects via `json.loads`.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn params(b: usize, beta: Option<f64>, ratio: Option<f64>) -> PyResult<model::ModelParams> {
    match (beta, ratio) {
        (Some(beta), None) => model::ModelParams::new(b, beta).map_err(err),
        (None, Some(r)) => model::ModelParams::from_ratio(b, r).map_err(err),
        _ => Err(PyValueError::new_err("give exactly one of beta= or ratio=")),
    }
}

#[pyclass(name = "ModelParams", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyParams(model::ModelParams);

#[pymethods]
impl PyParams {
    #[new]
    #[pyo3(signature = (b, beta=None, ratio=None))]
    fn new(b: usize, beta: Option<f64>, ratio: Option<f64>) -> PyResult<Self> {
        params(b, beta, ratio).map(PyParams)
    }

    #[getter]
    fn b(&self) -> usize {
        self.0.b
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta
    }

    #[getter]
    fn beta_c(&self) -> f64 {
        self.0.beta_c
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.0.theta
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha
    }

    #[getter]
    fn regime(&self) -> String {
        format!("{:?}", self.0.regime).to_lowercase()
    }

    fn __repr__(&self) -> String {
        format!("ModelParams(b={}, beta={})", self.0.b, self.0.beta)
    }
}

/// Renormalization flow of the DG potential, levels `0..=levels`.
#[pyclass(name = "PotentialTable", frozen)]
struct PyTable(PotentialTable);

#[pymethods]
impl PyTable {
    #[new]
    fn new(p: &PyParams, levels: usize) -> PyResult<Self> {
        PotentialTable::dg(&p.0, levels).map(PyTable).map_err(err)
    }

    #[getter]
    fn depth(&self) -> usize {
        self.0.depth()
    }

    #[getter]
    fn gaps(&self) -> Vec<f64> {
        self.0.gaps.clone()
    }

    #[getter]
    fn r(&self) -> Vec<f64> {
        self.0.r.clone()
    }

    #[getter]
    fn c_ratios(&self) -> Vec<f64> {
        self.0.c_ratios.clone()
    }

    /// Normalized Fourier coefficients `â_k(n)`, `n = 0..N_k`.
    fn ahat(&self, k: usize) -> PyResult<Vec<f64>> {
        self.0
            .levels
            .get(k)
            .map(|v| v.half())
            .ok_or_else(|| PyValueError::new_err(format!("level {k} not in table")))
    }

    /// Effective potential `v_k(z)`.
    fn potential(&self, k: usize, z: f64) -> PyResult<f64> {
        self.0
            .levels
            .get(k)
            .map(|v| v.potential(z))
            .ok_or_else(|| PyValueError::new_err(format!("level {k} not in table")))
    }

    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &harness::runner::flow_summary(&self.0))
    }

    /// Exact DG leaf values on `Λ_n` for one replicate of the seeded stream.
    #[pyo3(signature = (n, seed, replicate=0))]
    fn sample(&self, n: usize, seed: u64, replicate: u64) -> PyResult<Vec<f64>> {
        let mut ctx = KernelContext::new(&self.0);
        let mut rng = seed_stream(seed, replicate, harness::seed::TAG_SAMPLE);
        sample_dg(&mut ctx, n, &mut rng, false).map(|s| s.values).map_err(err)
    }

    /// Coupled DG/GFF fields; returns a dict with leaves, flags and bounds.
    #[pyo3(signature = (n, seed, replicate=0))]
    fn couple<'py>(&self, py: Python<'py>, n: usize, seed: u64, replicate: u64) -> PyResult<Bound<'py, PyAny>> {
        let ctx = CouplingContext::new(&self.0).map_err(err)?;
        let mut rng = seed_stream(seed, replicate, harness::seed::TAG_COUPLE);
        let s = couple_fields(&ctx, n, &mut rng).map_err(err)?;
        to_py(py, &s)
    }
}

#[pyfunction]
#[pyo3(signature = (p, n, seed, replicate=0))]
fn sample_gff_field(p: &PyParams, n: usize, seed: u64, replicate: u64) -> Vec<f64> {
    let mut rng = seed_stream(seed, replicate, harness::seed::TAG_SAMPLE);
    sample_gff(&p.0, n, &mut rng, false).values
}

/// `−Δ_n^{−1}` as a list of rows.
#[pyfunction]
fn green_matrix(b: usize, n: usize) -> PyResult<Vec<Vec<f64>>> {
    let p = model::ModelParams::new(b, 1.0).map_err(err)?;
    let g = model::green_matrix(&p, n).map_err(err)?;
    Ok((0..g.nrows()).map(|i| g.row(i).iter().copied().collect()).collect())
}

#[pyfunction]
fn hierarchical_distance(b: usize, n: usize, i: usize, j: usize) -> usize {
    model::index_distance(b, i, j, n)
}

/// Brute-force DG law on `{−L..L}^{Λ_n}` as `(states, probabilities)`.
#[pyfunction]
fn exact_law(p: &PyParams, n: usize, l: i32) -> PyResult<(Vec<Vec<i32>>, Vec<f64>)> {
    let law = dg_exact_small(&p.0, n, l).map_err(err)?;
    Ok((law.states, law.probs))
}

#[pyfunction]
fn centering<'py>(py: Python<'py>, p: &PyParams, n: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &extremes::centering(&p.0, n).map_err(err)?)
}

#[pyfunction]
fn select_subsequence<'py>(
    py: Python<'py>,
    p: &PyParams,
    s: f64,
    tol: f64,
    n_min: usize,
    n_max: usize,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &extremes::select_subsequence(&p.0, s, tol, n_min, n_max).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (maxima, step=1.0, resamples=200, seed=0))]
fn tail_slope<'py>(
    py: Python<'py>,
    maxima: Vec<f64>,
    step: f64,
    resamples: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &extremes::tail_slope(&maxima, None, step, resamples, seed).map_err(err)?)
}

/// Runs an experiment from its JSON configuration; returns the run summary.
#[pyfunction]
#[pyo3(signature = (config_json, out=None, workers=1))]
fn run<'py>(py: Python<'py>, config_json: &str, out: Option<PathBuf>, workers: usize) -> PyResult<Bound<'py, PyAny>> {
    let config = ExperimentConfig::from_json(config_json).map_err(err)?;
    let outcome = harness::run(
        &config,
        &RunOptions {
            out,
            workers,
            cache_dir: std::env::var_os("HDG_CACHE_DIR").map(PathBuf::from),
        },
    )
    .map_err(err)?;
    to_py(py, &serde_json::json!({ "passed": outcome.passed, "summary": outcome.summary }))
}

#[pyfunction]
#[pyo3(signature = (quick=true, seed=0))]
fn validate<'py>(py: Python<'py>, quick: bool, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let pool = harness::runner::build_pool(1).map_err(err)?;
    to_py(py, &harness::validate_suite(quick, seed, &pool))
}

#[pymodule]
fn hdg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyParams>()?;
    m.add_class::<PyTable>()?;
    m.add_function(wrap_pyfunction!(sample_gff_field, m)?)?;
    m.add_function(wrap_pyfunction!(green_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(hierarchical_distance, m)?)?;
    m.add_function(wrap_pyfunction!(exact_law, m)?)?;
    m.add_function(wrap_pyfunction!(centering, m)?)?;
    m.add_function(wrap_pyfunction!(select_subsequence, m)?)?;
    m.add_function(wrap_pyfunction!(tail_slope, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
