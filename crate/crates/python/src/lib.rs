//! Python bindings.

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use psbma_core::aggregate::KBin;
use psbma_core::cli::corpus_summary_json;
use psbma_core::effectsize::{convert_point, convert_with_se, Estimate, Metric};
use psbma_core::ensemble::{ModelSpace, ModelSpaceConfig};
use psbma_core::inference::{FitReport, IntegrationSettings};
use psbma_core::ingest::{validate_and_filter, write_precomputed_csv};
use psbma_core::measures::{self, read_measures_csv, MeasureSet};
use psbma_core::remeta::fit_reml;
use psbma_core::simgen::{simulate_corpus, SimConfig};
use psbma_core::Error;

fn py_err(e: Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn metric(tag: &str) -> PyResult<Metric> {
    tag.parse().map_err(py_err)
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Convert an effect size, and its standard error when given.
#[pyfunction]
#[pyo3(signature = (value, from_metric, to_metric, se=None))]
fn convert<'py>(py: Python<'py>, value: f64, from_metric: &str, to_metric: &str, se: Option<f64>) -> PyResult<Bound<'py, PyAny>> {
    let (from, to) = (metric(from_metric)?, metric(to_metric)?);
    Ok(match se {
        Some(se) => convert_with_se(value, se, from, to).map_err(py_err)?.into_pyobject(py)?.into_any(),
        None => convert_point(value, from, to).map_err(py_err)?.into_pyobject(py)?.into_any(),
    })
}

/// Classical random-effects fit with REML heterogeneity.
#[pyfunction]
#[pyo3(signature = (ys, ses, alpha=0.05))]
fn reml<'py>(py: Python<'py>, ys: Vec<f64>, ses: Vec<f64>, alpha: f64) -> PyResult<Bound<'py, PyDict>> {
    if ys.len() != ses.len() {
        return Err(PyValueError::new_err("ys and ses differ in length"));
    }
    let data: Vec<(f64, f64)> = ys.into_iter().zip(ses).collect();
    let fit = fit_reml(&data, alpha).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("tau2", fit.tau2)?;
    d.set_item("mu", fit.mu_hat)?;
    d.set_item("se", fit.se_mu)?;
    d.set_item("p_value", fit.p_value)?;
    d.set_item("significant", fit.significant)?;
    d.set_item("converged", fit.converged)?;
    Ok(d)
}

#[pyfunction]
fn eif(bf_unadj: f64, bf_adj: f64) -> PyResult<f64> {
    measures::eif(bf_unadj, bf_adj).map_err(py_err)
}

#[pyfunction]
fn seif(log_eif: f64, n: usize) -> PyResult<f64> {
    measures::seif(log_eif, n).map_err(py_err)
}

#[pyfunction]
fn evidence_label(bf: f64) -> PyResult<&'static str> {
    measures::evidence_label(bf).map(|l| l.as_str()).map_err(py_err)
}

/// Label of the study-count bin holding `k`.
#[pyfunction]
fn kbin(k: usize) -> String {
    KBin::of(k).label()
}

/// Adjusted and unadjusted ensemble fits of one meta-analysis.
#[pyclass(frozen, module = "psbma")]
struct Analysis {
    report: FitReport,
    measures: MeasureSet,
}

#[pymethods]
impl Analysis {
    #[getter]
    fn post_effect_adj(&self) -> f64 {
        self.report.post_effect_adj
    }

    #[getter]
    fn post_effect_unadj(&self) -> f64 {
        self.report.post_effect_unadj
    }

    #[getter]
    fn post_psb(&self) -> Option<f64> {
        self.report.post_psb
    }

    /// Natural-log inclusion Bayes factor for the effect.
    #[getter]
    fn log_bf_effect(&self) -> Option<f64> {
        self.report.bf_effect.as_ref().map(|b| b.log)
    }

    #[getter]
    fn log_bf_psb(&self) -> Option<f64> {
        self.report.bf_psb.as_ref().map(|b| b.log)
    }

    /// (mean, ci_low, ci_high) of the effect given that it is present.
    #[getter]
    fn mu_conditional(&self) -> Option<(f64, f64, f64)> {
        self.report.mu_conditional.map(|e| (e.mean, e.ci_low, e.ci_high))
    }

    #[getter]
    fn flipped(&self) -> bool {
        self.report.flipped
    }

    fn measures<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &to_json(&self.measures)?)
    }

    fn report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &to_json(&self.report)?)
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.report)
    }

    fn __repr__(&self) -> String {
        let psb = self.report.post_psb.map_or("None".to_string(), |p| format!("{p:.4}"));
        format!("Analysis(ma_id={:?}, post_effect_adj={:.4}, post_psb={psb})", self.report.ma_id, self.report.post_effect_adj)
    }
}

/// Fit the full and the unadjusted ensemble to one set of estimates.
#[pyfunction]
#[pyo3(signature = (ys, ses, metric="COHEN_D", seed=0, ma_id="MA", field="unspecified", config=None))]
#[allow(clippy::too_many_arguments)]
fn analyze(
    py: Python<'_>,
    ys: Vec<f64>,
    ses: Vec<f64>,
    metric: &str,
    seed: u64,
    ma_id: &str,
    field: &str,
    config: Option<&str>,
) -> PyResult<Analysis> {
    if ys.len() != ses.len() {
        return Err(PyValueError::new_err("ys and ses differ in length"));
    }
    let m = self::metric(metric)?;
    let data = ys
        .iter()
        .zip(&ses)
        .enumerate()
        .map(|(i, (&y, &se))| Estimate::new(y, se, m, format!("{}", i + 1)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    let (space, settings) = match config {
        Some(text) => {
            let cfg = psbma_core::cli::RunConfig::from_toml(text).map_err(py_err)?;
            (ModelSpace::from_config(&cfg.model_space).map_err(py_err)?, cfg.integration)
        }
        None => (ModelSpace::from_config(&ModelSpaceConfig::default()).map_err(py_err)?, IntegrationSettings::default()),
    };
    let settings = settings.with_seed(seed);
    let (measures, report) = py.detach(|| measures::analyze(ma_id, field, &data, &space, &settings)).map_err(py_err)?;
    Ok(Analysis { report, measures })
}

/// Simulated corpus as PRECOMPUTED CSV text.
#[pyfunction]
#[pyo3(signature = (config, seed=None))]
fn simulate(py: Python<'_>, config: &str, seed: Option<u64>) -> PyResult<String> {
    let cfg = SimConfig::from_toml(config).map_err(py_err)?;
    let seed = seed.unwrap_or(cfg.seed);
    let (ds, _) = py.detach(|| simulate_corpus(&cfg, seed)).map_err(py_err)?;
    let (ds, _) = validate_and_filter(ds);
    let mut buf = Vec::new();
    write_precomputed_csv(&ds, &mut buf).map_err(py_err)?;
    String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Field and study-count summaries of MeasureSet CSV text.
#[pyfunction]
fn summarize<'py>(py: Python<'py>, measures_csv: &str) -> PyResult<Bound<'py, PyAny>> {
    let rows = read_measures_csv(measures_csv.as_bytes()).map_err(py_err)?;
    json_to_py(py, &corpus_summary_json(&rows).map_err(py_err)?)
}

/// Run the command-line interface and return its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| psbma_core::cli::run(std::iter::once("psbma".to_string()).chain(args)))
}

/// Adds every function and class to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Analysis>()?;
    m.add_function(wrap_pyfunction!(convert, m)?)?;
    m.add_function(wrap_pyfunction!(reml, m)?)?;
    m.add_function(wrap_pyfunction!(eif, m)?)?;
    m.add_function(wrap_pyfunction!(seif, m)?)?;
    m.add_function(wrap_pyfunction!(evidence_label, m)?)?;
    m.add_function(wrap_pyfunction!(kbin, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[pymodule]
#[pyo3(name = "psbma")]
fn psbma_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
