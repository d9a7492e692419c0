//! Python bindings: thin wrappers that convert nested lists to matrices and
//! errors to `ValueError` carrying the workbench's tagged message.

use std::collections::BTreeMap;

use crisp::config::ExperimentConfig;
use crisp::continual_engine::{pca_guided_init, replicate_average_init, run_protocol, RunOptions};
use crisp::losses::hungarian_match;
use crisp::synthbench::{forgetting_ratio, generate_dataset, query_correlation, ForgettingLedger, FrIndicator};
use crisp::{numerics, Matrix};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

type Rows = Vec<Vec<f64>>;

fn to_py<T>(r: crisp::Result<T>) -> PyResult<T> {
    r.map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows_of(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn indicator(name: &str) -> crisp::Result<FrIndicator> {
    match name {
        "corrected" => Ok(FrIndicator::Corrected),
        "literal" => Ok(FrIndicator::Literal),
        other => Err(crisp::Error::Parameter(format!(
            "indicator must be `corrected` or `literal`, got `{other}`"
        ))),
    }
}

/// Generates every step's data in memory, trains, and returns report.json text.
pub fn run_experiment_json(config_toml: &str, indicator_name: &str, workers: usize) -> crisp::Result<String> {
    let config = ExperimentConfig::from_toml(config_toml)?;
    let protocol = config.protocol()?;
    let datasets = (0..protocol.steps)
        .map(|t| generate_dataset(&config.generator_config(&protocol, t), &protocol.class_sets[t]))
        .collect::<crisp::Result<Vec<_>>>()?;
    let options = RunOptions {
        fr_indicator: indicator(indicator_name)?,
        workers,
    };
    let run = run_protocol(&protocol, &datasets, &config.train_config(), options, |_, _, _| Ok(()))?;
    serde_json::to_string_pretty(&run.report).map_err(|e| crisp::Error::Parse(e.to_string()))
}

/// Principal directions, scaled components and singular values of `rows`.
#[pyfunction]
fn pca(rows: Rows, k: usize) -> PyResult<(Vec<f64>, Rows, Rows, Vec<f64>)> {
    let a = to_py(Matrix::from_rows(&rows))?;
    let r = to_py(numerics::pca(&a, k))?;
    Ok((
        r.mean,
        rows_of(&r.directions),
        rows_of(&r.components),
        r.singular_values,
    ))
}

/// Minimum-cost `(query, target)` pairs covering every target column.
#[pyfunction]
fn hungarian(cost: Rows) -> PyResult<Vec<(usize, usize)>> {
    let c = to_py(Matrix::from_rows(&cost))?;
    Ok(to_py(hungarian_match(&c))?.pairs)
}

/// Pearson correlation between every pair of query rows.
#[pyfunction]
fn correlation(queries: Rows) -> PyResult<Rows> {
    let q = to_py(Matrix::from_rows(&queries))?;
    Ok(rows_of(&to_py(query_correlation(&q))?))
}

#[pyfunction]
#[pyo3(signature = (old_queries, c_prev, c_t, seed = 0))]
fn pca_init(old_queries: Rows, c_prev: usize, c_t: usize, seed: u64) -> PyResult<Rows> {
    let q = to_py(Matrix::from_rows(&old_queries))?;
    Ok(rows_of(&to_py(pca_guided_init(&q, c_prev, c_t, seed))?))
}

#[pyfunction]
fn replicate_init(old_queries: Rows, c_t: usize) -> PyResult<Rows> {
    let q = to_py(Matrix::from_rows(&old_queries))?;
    Ok(rows_of(&to_py(replicate_average_init(&q, c_t))?))
}

/// Forgetting ratio from `{category: (first_step, first_ap)}` and `{category: final_ap}`.
#[pyfunction]
#[pyo3(signature = (num_steps, first, last, indicator = "corrected"))]
fn forgetting(
    num_steps: usize,
    first: BTreeMap<usize, (usize, f64)>,
    last: BTreeMap<usize, f64>,
    indicator: &str,
) -> PyResult<f64> {
    let ledger = ForgettingLedger { num_steps, first, last };
    Ok(to_py(forgetting_ratio(&ledger, to_py(self::indicator(indicator))?))?.fr)
}

/// Runs a full protocol from config text; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config_toml = "", indicator = "corrected", workers = 1))]
fn run_experiment(py: Python<'_>, config_toml: &str, indicator: &str, workers: usize) -> PyResult<String> {
    to_py(py.detach(|| run_experiment_json(config_toml, indicator, workers)))
}

#[pymodule]
fn crisp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(pca, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(correlation, m)?)?;
    m.add_function(wrap_pyfunction!(pca_init, m)?)?;
    m.add_function(wrap_pyfunction!(replicate_init, m)?)?;
    m.add_function(wrap_pyfunction!(forgetting, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
