"""Smoke test for the crowdrl Python extension.

Uses an installed `crowdrl` module when importable (e.g. after
`maturin develop -m crates/py/Cargo.toml`); otherwise loads the cdylib
built by

    cargo build --release -p crowdrl-py --features extension-module
"""
import importlib.util
import pathlib
import sys


def load():
    try:
        import crowdrl

        return crowdrl
    except ImportError:
        pass
    root = pathlib.Path(__file__).resolve().parent.parent
    for profile in ("release", "debug"):
        lib = root / "target" / profile / "libcrowdrl_py.so"
        if lib.exists():
            spec = importlib.util.spec_from_file_location("crowdrl", lib)
            mod = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(mod)
            return mod
    sys.exit("crowdrl extension not found; build it with "
             "`cargo build --release -p crowdrl-py --features extension-module`")


def main():
    crowdrl = load()

    schema = crowdrl.FeatureSchema()
    task = schema.encode_task(category=2, domain=0, award=250.0)
    assert len(task) == schema.dim
    net = crowdrl.QNetwork(2 * schema.dim, width=16, heads=2, seed=0)
    q = net.q_values([task + task, [0.0] * (2 * schema.dim)])
    assert len(q) == 2 and all(v == v for v in q)

    assert abs(crowdrl.task_quality([0.5, 0.5], p=1.0) - 1.0) < 1e-12
    assert crowdrl.rank_tasks(q) in ([0, 1], [1, 0])
    m = crowdrl.metrics([(0, 1, 1, 0.3), (5, 1, None, 0.0)])
    assert m["cr"] == 0.5

    rows = crowdrl.run(
        "policy = greedy-cos\n[world]\nn_workers = 20\nn_arrivals = 400\n",
        ["seed=1"],
    )
    total = rows[-1]
    assert total["month"] == "all" and 0.0 <= total["cr"] <= 1.0
    print(f"greedy-cos on a small synthetic world: cr={total['cr']:.4f} qg={total['qg']:.2f}")

    try:
        crowdrl.run("[ddqn]\nlr = fast\n")
    except ValueError as e:
        assert "line 2" in str(e)
    else:
        raise AssertionError("bad config accepted")
    print("ok")


if __name__ == "__main__":
    main()
