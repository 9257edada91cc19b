//! Python bindings: schema/feature helpers, the Q-network, metrics, and
//! whole experiments driven by the same config text as the CLI.

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crowdrl::bench::{bench_update_latency, BenchConfig};
use crowdrl::metrics::{self as m, Interaction, InteractionLog, MetricsRow};
use crowdrl::qnetwork::{NetConfig, QNetwork};
use crowdrl::tensor::ParamSet;
use crowdrl_cli::config::{ExperimentConfig, RawConfig};

fn core_err(e: crowdrl::Error) -> PyErr {
    match e {
        crowdrl::Error::InvalidInput(_) | crowdrl::Error::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn cli_err(e: crowdrl_cli::CliError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "FeatureSchema", module = "crowdrl")]
#[derive(Clone)]
struct PySchema(crowdrl::domain::FeatureSchema);

#[pymethods]
impl PySchema {
    #[new]
    #[pyo3(signature = (n_categories=20, n_domains=3, award_bin_edges=vec![10.0, 100.0, 1000.0, 10000.0], history_window=20))]
    fn new(n_categories: usize, n_domains: usize, award_bin_edges: Vec<f64>, history_window: usize) -> PyResult<Self> {
        crowdrl::domain::FeatureSchema::new(n_categories, n_domains, award_bin_edges, history_window).map(Self).map_err(core_err)
    }

    /// Length of task and worker feature vectors.
    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn award_bin(&self, award: f64) -> usize {
        self.0.award_bin(award)
    }

    /// One-hot/normalized feature vector of a task.
    fn encode_task(&self, category: usize, domain: usize, award: f64) -> PyResult<Vec<f64>> {
        let t = crowdrl::domain::TaskRecord::new(0, 0, 1, category, domain, award).map_err(core_err)?;
        crowdrl::domain::encode_task(&t, &self.0).map(|f| f.0).map_err(core_err)
    }

    fn __repr__(&self) -> String {
        format!("FeatureSchema(dim={})", self.0.dim())
    }
}

/// A freshly initialized Q-network, evaluated without gradients.
#[pyclass(name = "QNetwork", module = "crowdrl")]
struct PyQNetwork {
    net: QNetwork,
    params: ParamSet,
}

#[pymethods]
impl PyQNetwork {
    #[new]
    #[pyo3(signature = (input_dim, width=128, heads=4, seed=0))]
    fn new(input_dim: usize, width: usize, heads: usize, seed: u64) -> PyResult<Self> {
        let net = QNetwork::new(NetConfig::new(input_dim, width, heads).map_err(core_err)?).map_err(core_err)?;
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(seed)).map_err(core_err)?;
        Ok(Self { net, params })
    }

    /// Q value of each row (one row per available task).
    fn q_values(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(PyValueError::new_err("rows have different lengths"));
        }
        let m = Array2::from_shape_vec((rows.len(), d), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))?;
        self.net.eval_rows(&self.params, m).map_err(core_err)
    }
}

/// Quality of a task completed by workers of the given qualities.
#[pyfunction]
#[pyo3(signature = (qualities, p=2.0))]
fn task_quality(qualities: Vec<f64>, p: f64) -> PyResult<f64> {
    crowdrl::requester::task_quality(&qualities, p).map_err(core_err)
}

/// `w * qw + (1 - w) * qr`.
#[pyfunction]
fn aggregate(qw: Vec<f64>, qr: Vec<f64>, w: f64) -> PyResult<Vec<f64>> {
    crowdrl::policy::aggregate(&qw, &qr, w).map_err(core_err)
}

/// Indices ordered by decreasing value.
#[pyfunction]
fn rank_tasks(q: Vec<f64>) -> Vec<usize> {
    crowdrl::policy::rank_tasks(&q)
}

fn row_dict<'py>(py: Python<'py>, r: &MetricsRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("month", &r.month)?;
    d.set_item("policy", &r.policy)?;
    for (k, v) in [("cr", r.cr), ("kcr", r.kcr), ("ndcg_cr", r.ndcg_cr), ("qg", r.qg), ("kqg", r.kqg), ("ndcg_qg", r.ndcg_qg)] {
        d.set_item(k, v)?;
    }
    Ok(d)
}

/// The six measures over `(time, list_len, completed_rank | None, gain)`
/// tuples.
#[pyfunction]
#[pyo3(signature = (interactions, k=5))]
fn metrics<'py>(py: Python<'py>, interactions: Vec<(i64, usize, Option<usize>, f64)>, k: usize) -> PyResult<Bound<'py, PyDict>> {
    let log = InteractionLog {
        entries: interactions
            .into_iter()
            .map(|(time, list_len, completed_rank, gain)| Interaction { time, list_len, completed_rank, gain, pool_size: list_len })
            .collect(),
    };
    row_dict(py, &MetricsRow::compute(&log, "all", "", k).map_err(core_err)?)
}

/// Position discount of a 1-based rank.
#[pyfunction]
fn discount(rank: usize) -> f64 {
    m::discount(rank)
}

/// Runs one experiment. `config` uses the CLI's config syntax and each
/// override is `section.key=value`. Returns the metric rows (monthly then
/// `all`) and, with `out`, also writes the CLI's artifacts there.
#[pyfunction]
#[pyo3(signature = (config="", overrides=Vec::new(), out=None))]
fn run<'py>(py: Python<'py>, config: &str, overrides: Vec<String>, out: Option<String>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut raw = RawConfig::parse(config).map_err(cli_err)?;
    for kv in &overrides {
        raw.apply_override(kv).map_err(cli_err)?;
    }
    let scratch;
    match &out {
        Some(o) => raw.set("out", o.clone()),
        None => {
            scratch = std::env::temp_dir().join(format!("crowdrl-py-{}", std::process::id()));
            raw.set("out", scratch.display().to_string());
        }
    }
    let cfg = ExperimentConfig::resolve(raw).map_err(cli_err)?;
    let outcome = py.allow_threads(|| crowdrl_cli::run_experiment(&cfg)).map_err(cli_err)?;
    if out.is_none() {
        let _ = std::fs::remove_dir_all(&cfg.out);
    }
    outcome.report.rows.iter().map(|r| row_dict(py, r)).collect()
}

/// Mean wall-clock milliseconds of one learning update per pool size.
#[pyfunction]
#[pyo3(signature = (pool_sizes, reps=3, width=128, heads=4, seed=0))]
fn bench_update(py: Python<'_>, pool_sizes: Vec<usize>, reps: usize, width: usize, heads: usize, seed: u64) -> PyResult<Vec<(usize, f64)>> {
    let cfg = BenchConfig { width, heads, seed, ..BenchConfig::default() };
    let rows = py.allow_threads(|| bench_update_latency(&pool_sizes, reps, &cfg)).map_err(core_err)?;
    Ok(rows.into_iter().map(|r| (r.pool_size, r.mean_ms)).collect())
}

#[pymodule]
#[pyo3(name = "crowdrl")]
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchema>()?;
    m.add_class::<PyQNetwork>()?;
    m.add_function(wrap_pyfunction!(task_quality, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(rank_tasks, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(discount, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(bench_update, m)?)?;
    m.add("POLICIES", crowdrl_cli::POLICIES.to_vec())?;
    Ok(())
}
