//! Python bindings: a thin functional surface over the verification engine.
//!
//! Configs are passed as TOML text (the same schema the CLI consumes) and
//! results come back as JSON text, so the Python side needs nothing beyond
//! `json`. Engine errors map to `ValueError`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use iwl_core::calculus::fd_lift_check;
use iwl_core::measure::{wasserstein2_1d as w2_1d, EmpiricalMeasure};
use iwl_core::runner::{run_sweep, run_to_dir};
use iwl_core::scenario::{catalog_text, measure_functional, parse_config};
use iwl_core::EngineError;

fn err(e: EngineError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// The registered dynamics templates, test functions, measure functionals
/// and formula tokens, as the CLI's `catalog` subcommand prints them.
#[pyfunction]
fn catalog() -> String {
    catalog_text()
}

/// Execute one scenario config (TOML text). Writes report.json, terms.csv
/// and manifest.json into `out_dir` when given, and returns
/// `(pass, report_json)`.
#[pyfunction]
#[pyo3(signature = (config, out_dir=None, workers=None))]
fn run(config: &str, out_dir: Option<&str>, workers: Option<usize>) -> PyResult<(bool, String)> {
    let cfg = parse_config(config).map_err(err)?;
    let dir = out_dir.map(std::path::Path::new);
    let artifacts = run_to_dir(&cfg, dir, workers).map_err(err)?;
    let json = serde_json::to_string(&artifacts.report)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((artifacts.pass, json))
}

/// Run the convergence study described by the config's [sweep] table and
/// return `(pass, sweep_json)`.
#[pyfunction]
#[pyo3(signature = (config, out_dir=None, workers=None))]
fn sweep(config: &str, out_dir: Option<&str>, workers: Option<usize>) -> PyResult<(bool, String)> {
    let cfg = parse_config(config).map_err(err)?;
    let dir = out_dir.map(std::path::Path::new);
    let artifacts = run_sweep(&cfg, dir, workers).map_err(err)?;
    let json = serde_json::to_string(&artifacts.result)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((artifacts.pass, json))
}

/// 2-Wasserstein distance between two one-dimensional empirical measures
/// given by their atom lists (uniform weights).
#[pyfunction]
fn wasserstein2_1d(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    let mu = EmpiricalMeasure::uniform_1d(&xs).map_err(err)?;
    let nu = EmpiricalMeasure::uniform_1d(&ys).map_err(err)?;
    w2_1d(&mu, &nu).map_err(err)
}

/// Worst finite-difference defect of the lifted derivative of a named
/// measure functional (see `catalog()`) at the uniform empirical measure on
/// `atoms`, with central-difference step `h`.
#[pyfunction]
#[pyo3(signature = (psi, atoms, params=vec![], h=1e-4))]
fn lift_check(psi: &str, atoms: Vec<f64>, params: Vec<f64>, h: f64) -> PyResult<f64> {
    let f = measure_functional(psi, &params).map_err(err)?;
    let mu = EmpiricalMeasure::uniform_1d(&atoms).map_err(err)?;
    fd_lift_check(&f, &mu, h).map_err(err)
}

#[pymodule]
#[pyo3(name = "_native")]
fn native(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(catalog, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein2_1d, m)?)?;
    m.add_function(wrap_pyfunction!(lift_check, m)?)?;
    Ok(())
}
