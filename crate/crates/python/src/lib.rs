//! Python bindings: model bookkeeping, phantoms, cardiac metrics, population
//! statistics and the command-line entry point.
//!
//! Structured results cross the boundary as plain dicts and lists. Masks are
//! passed flat in row-major order together with their shape.

use cinema_core::backbone::ModelConfig;
use cinema_core::metrics;
use cinema_core::phantom::{self, PhantomParams};
use cinema_core::stats::{self, CoxOptions, Group};
use cinema_core::study::View;
use ndarray::{Array2, ArrayD, IxDyn};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Serialise through JSON into Python objects.
fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn mask(values: Vec<u8>, shape: Vec<usize>) -> PyResult<ArrayD<u8>> {
    ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(value_err)
}

fn design(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let p = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err("design rows differ in length"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, p), rows.into_iter().flatten().collect()).map_err(value_err)
}

fn phantom_params(json: Option<&str>) -> PyResult<PhantomParams> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(value_err),
        None => Ok(PhantomParams::default()),
    }
}

/// Architecture settings of the masked autoencoder.
#[pyclass(name = "ModelConfig")]
#[derive(Clone)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    /// `"base"`, `"desk"`, or a JSON object with every field.
    #[new]
    fn new(spec: &str) -> PyResult<Self> {
        let inner = match spec {
            "base" => ModelConfig::base(),
            "desk" => ModelConfig::desk(),
            json => serde_json::from_str(json).map_err(value_err)?,
        };
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn n_tokens(&self) -> usize {
        self.inner.n_tokens()
    }

    /// Token count per view key.
    fn view_tokens(&self) -> Vec<(String, usize)> {
        self.inner.views.iter().map(|s| (s.view.key().to_string(), s.n_tokens())).collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig(embed_dim={}, encoder_depth={}, views={})", self.inner.embed_dim, self.inner.encoder_depth, self.inner.views.len())
    }
}

/// Closed-form volumes, EF, MAPSE and GLS of a phantom (default parameters when `params` is None).
#[pyfunction]
#[pyo3(signature = (params=None))]
fn phantom_ground_truth(py: Python<'_>, params: Option<&str>) -> PyResult<Py<PyAny>> {
    let gt = phantom::analytic_ground_truth(&phantom_params(params)?).map_err(value_err)?;
    to_py(py, &gt)
}

/// Per-phase LV, RV and myocardium volumes (ml) of the voxelised short-axis phantom.
#[pyfunction]
#[pyo3(signature = (params=None))]
fn phantom_volumes(params: Option<&str>) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let study = phantom::generate_study(&phantom_params(params)?, "phantom").map_err(value_err)?;
    let sax = study.view(View::Sax).ok_or_else(|| PyValueError::new_err("no short-axis view"))?;
    let masks = sax.mask.as_ref().ok_or_else(|| PyValueError::new_err("no masks"))?;
    let s = metrics::VolumeSeries::from_masks(masks.view(), sax.spacing).map_err(value_err)?;
    Ok((s.lv, s.rv, s.myo))
}

#[pyfunction]
fn dice(a: Vec<u8>, b: Vec<u8>, shape: Vec<usize>, label: u8) -> PyResult<f64> {
    metrics::dice(mask(a, shape.clone())?.view(), mask(b, shape)?.view(), label).map_err(value_err)
}

#[pyfunction]
fn hd95(a: Vec<u8>, b: Vec<u8>, shape: Vec<usize>, label: u8, spacing: Vec<f64>) -> PyResult<f64> {
    metrics::hd95(mask(a, shape.clone())?.view(), mask(b, shape)?.view(), label, &spacing).map_err(value_err)
}

#[pyfunction]
fn ef(edv: f64, esv: f64) -> PyResult<f64> {
    metrics::ef(edv, esv).map_err(value_err)
}

/// `(ef, ed_phase, es_phase)` of a volume curve.
#[pyfunction]
fn ef_from_series(volumes: Vec<f64>) -> PyResult<(f64, usize, usize)> {
    let s = metrics::ef_from_series(&volumes).map_err(value_err)?;
    Ok((s.ef, s.ed_phase, s.es_phase))
}

#[pyfunction]
fn mapse(ed: [[f64; 2]; 3], es: [[f64; 2]; 3]) -> f64 {
    metrics::mapse(&ed, &es)
}

#[pyfunction]
fn gls(length_ed: f64, length_es: f64) -> PyResult<f64> {
    metrics::gls(length_ed, length_es).map_err(value_err)
}

/// Least squares with an intercept; `x` is a list of rows.
#[pyfunction]
fn ols_fit(py: Python<'_>, y: Vec<f64>, x: Vec<Vec<f64>>, names: Vec<String>) -> PyResult<Py<PyAny>> {
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    to_py(py, &stats::ols_fit(&y, &design(x)?, &names).map_err(value_err)?)
}

#[pyfunction]
fn cox_fit(py: Python<'_>, time: Vec<f64>, event: Vec<bool>, x: Vec<Vec<f64>>, names: Vec<String>) -> PyResult<Py<PyAny>> {
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    to_py(py, &stats::cox_fit(&time, &event, &design(x)?, &names, CoxOptions::default()).map_err(value_err)?)
}

/// Positive-rate ratio of White to non-White subjects above the `percentile` threshold.
#[pyfunction]
fn disparity_ratio(py: Python<'_>, values: Vec<f64>, white: Vec<bool>, percentile: f64) -> PyResult<Py<PyAny>> {
    let groups: Vec<Group> = white.iter().map(|&w| if w { Group::White } else { Group::NonWhite }).collect();
    to_py(py, &stats::disparity_ratio(&values, &groups, percentile).map_err(value_err)?)
}

/// Paired bootstrap of two arms with a Welch t-test on the replicate means.
#[pyfunction]
#[pyo3(signature = (metric, arm, comparator, n_boot=100, seed=0))]
fn bootstrap_compare(py: Python<'_>, metric: &str, arm: Vec<f64>, comparator: Vec<f64>, n_boot: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let mut r = stats::bootstrap_compare(metric, &arm, &comparator, n_boot, seed).map_err(value_err)?;
    r.replicates.clear();
    r.comparator_replicates.clear();
    to_py(py, &r)
}

/// Run a `cinema` command, e.g. `run_cli(["phantom", "generate", ...])`, and return its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("cinema".to_string()).chain(args).collect();
    py.detach(|| cinema_core::cli::dispatch(argv))
}

#[pymodule]
fn cinema(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_function(wrap_pyfunction!(phantom_ground_truth, m)?)?;
    m.add_function(wrap_pyfunction!(phantom_volumes, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(ef, m)?)?;
    m.add_function(wrap_pyfunction!(ef_from_series, m)?)?;
    m.add_function(wrap_pyfunction!(mapse, m)?)?;
    m.add_function(wrap_pyfunction!(gls, m)?)?;
    m.add_function(wrap_pyfunction!(ols_fit, m)?)?;
    m.add_function(wrap_pyfunction!(cox_fit, m)?)?;
    m.add_function(wrap_pyfunction!(disparity_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_compare, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
