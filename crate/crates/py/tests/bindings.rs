use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};

fn with_module(code: &str) {
    Python::with_gil(|py| {
        let m = PyModule::new_bound(py, "crowdrl").unwrap();
        crowdrl_py::register(&m).unwrap();
        let locals = PyDict::new_bound(py);
        locals.set_item("crowdrl", m).unwrap();
        if let Err(e) = py.run_bound(code, None, Some(&locals)) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn schema_and_network() {
    with_module(
        r#"
s = crowdrl.FeatureSchema()
assert s.dim == 28, s.dim
f = s.encode_task(3, 1, 500.0)
assert len(f) == s.dim
net = crowdrl.QNetwork(2 * s.dim, width=16, heads=2, seed=1)
q = net.q_values([f + f, f + [0.0] * s.dim])
assert len(q) == 2
try:
    crowdrl.FeatureSchema(n_categories=0)
    raise AssertionError("accepted an empty schema")
except ValueError:
    pass
"#,
    );
}

#[test]
fn quality_metrics_and_ranking() {
    with_module(
        r#"
assert abs(crowdrl.task_quality([0.3, 0.4], 1.0) - 0.7) < 1e-12
assert crowdrl.rank_tasks([0.1, 0.9, 0.5]) == [1, 2, 0]
assert crowdrl.aggregate([1.0], [0.0], 0.25) == [0.25]
r = crowdrl.metrics([(0, 1, 1, 0.5), (1, 1, None, 0.0)])
assert r["cr"] == 0.5 and r["qg"] == 0.5
assert crowdrl.discount(1) == 1.0
"#,
    );
}

#[test]
fn run_returns_metric_rows() {
    with_module(
        r#"
rows = crowdrl.run("policy = random\n[world]\nn_workers = 10\nn_arrivals = 200\n", ["seed=3"])
assert rows[-1]["month"] == "all"
assert 0.0 <= rows[-1]["cr"] <= 1.0
try:
    crowdrl.run("[nope]\n")
    raise AssertionError("accepted a bad section")
except ValueError as e:
    assert "line 1" in str(e)
"#,
    );
}
