//! Python bindings. Configs and results cross the boundary as JSON strings
//! or plain Python lists and tuples.

use std::path::PathBuf;

use prevadapt::harness::{run_experiment, ExperimentConfig};
use prevadapt::metrics::{f1_score as core_f1, summarize_file};
use prevadapt::model::adjusted_posterior as core_adjusted;
use prevadapt::sem::{analytic_prevalence as core_analytic, gen_labels as core_gen, SemConfig, SemVariant};
use prevadapt::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Data(_) | Error::Unsupported(_) => PyValueError::new_err(e.to_string()),
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn variant(name: &str) -> PyResult<SemVariant> {
    serde_json::from_value(serde_json::Value::String(name.to_owned()))
        .map_err(|_| PyValueError::new_err(format!("unknown variant {name:?}")))
}

/// Default experiment configuration as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&ExperimentConfig::default()).map_err(json_err)
}

/// `(y, z)` label pairs drawn from the structural model.
#[pyfunction]
#[pyo3(signature = (variant_name, beta, n, seed, alpha=0.3))]
fn gen_labels(variant_name: &str, beta: f64, n: usize, seed: u64, alpha: f64) -> PyResult<Vec<(usize, usize)>> {
    let cfg = SemConfig { alpha, ..SemConfig::new(variant(variant_name)?, beta, n, seed) };
    core_gen(&cfg).map_err(to_py)
}

/// `(P(Y=1), [P(Y=1|Z=0), P(Y=1|Z=1)], P(Z=1))` in closed form.
#[pyfunction]
#[pyo3(signature = (variant_name, beta, alpha=0.3))]
fn analytic_prevalence(variant_name: &str, beta: f64, alpha: f64) -> PyResult<(f64, [f64; 2], f64)> {
    let p = core_analytic(variant(variant_name)?, beta, alpha).map_err(to_py)?;
    Ok((p.p_y1, p.p_y1_given_z, p.p_z1))
}

/// `Norm(prevalence * ratio)`.
#[pyfunction]
fn adjusted_posterior(ratio: Vec<f64>, prevalence: Vec<f64>) -> PyResult<Vec<f64>> {
    core_adjusted(&ratio, &prevalence).map(|p| p.into_inner()).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (predictions, truth, positive=1))]
fn f1_score(predictions: Vec<usize>, truth: Vec<usize>, positive: usize) -> PyResult<f64> {
    core_f1(&predictions, &truth, positive).map_err(to_py)
}

/// Runs an experiment from a JSON config and returns the per-cell rows as
/// JSON. `out_dir`, when given, overrides the config's output directory.
#[pyfunction]
#[pyo3(signature = (config_json, out_dir=None))]
fn run(py: Python<'_>, config_json: &str, out_dir: Option<PathBuf>) -> PyResult<String> {
    let mut cfg: ExperimentConfig = serde_json::from_str(config_json).map_err(json_err)?;
    if out_dir.is_some() {
        cfg.out_dir = out_dir;
    }
    let outcome = py.detach(|| run_experiment(&cfg)).map_err(to_py)?;
    serde_json::to_string(&serde_json::json!({
        "rows": outcome.rows,
        "summary": outcome.summary,
        "failures": outcome.failures,
        "config_hash": outcome.config_hash,
    }))
    .map_err(json_err)
}

/// Summary rows of a results CSV as JSON.
#[pyfunction]
fn summarize(results_csv: PathBuf) -> PyResult<String> {
    let rows = summarize_file(&results_csv).map_err(to_py)?;
    serde_json::to_string(&rows).map_err(json_err)
}

#[pymodule]
fn prevadapt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(gen_labels, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_prevalence, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    Ok(())
}
