use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crowdrl::simulator::EventKind;
use crowdrl_cli::config::{ExperimentConfig, RawConfig};
use crowdrl_cli::{gen_dataset, read_events, CliError, GenOptions};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_crowdrl"));
    // keep the caller's CROWDRL_* settings out of the runs
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("CROWDRL_")) {
        c.env_remove(k);
    }
    c
}

fn sample_log() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/sample.log")
}

/// The first `n` lines of the sample log after its header.
fn short_log(dir: &Path, n: usize) -> PathBuf {
    let text = std::fs::read_to_string(sample_log()).unwrap();
    let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).take(n).collect();
    let p = dir.join("short.log");
    std::fs::write(&p, body.join("\n") + "\n").unwrap();
    p
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "crowdrl {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn quick(log: &Path, out: &Path, policy: &str) -> Vec<String> {
    [
        "run",
        "--mode",
        "replay",
        "--log",
        log.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--policy",
        policy,
        "--set",
        "sim.warmup_days=0.1",
        "--set",
        "ddqn.width=8",
        "--set",
        "ddqn.heads=2",
        "--set",
        "ddqn.batch=4",
        "--set",
        "ddqn.train_start=4",
        "--set",
        "ddqn.w=1",
        "--set",
        "ddqn.min_future_mass_w=0.05",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn replay_writes_metrics_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let log = short_log(dir.path(), 250);
    let out = dir.path().join("run");
    let args = quick(&log, &out, "ddqn");
    run_ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "month,policy,cr,kcr,ndcg_cr,qg,kqg,ndcg_qg");
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    for r in &rows {
        assert_eq!(r.split(',').count(), 8, "{r}");
    }
    assert!(rows.last().unwrap().starts_with("all,ddqn,"));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    for key in ["policy", "seed", "config_hash", "git_revision", "crate_version", "wall_clock_s"] {
        assert!(manifest.get(key).is_some(), "manifest lacks {key}");
    }
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(out.join("checkpoint").is_dir());
    assert!(std::fs::read_to_string(out.join("latency.csv")).unwrap().starts_with("update,ms\n"));
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let log = short_log(dir.path(), 250);
    for policy in ["ddqn", "random"] {
        let mut csvs = Vec::new();
        for run in ["a", "b"] {
            let out = dir.path().join(format!("{policy}-{run}"));
            let args = quick(&log, &out, policy);
            run_ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
            csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
        }
        assert_eq!(csvs[0], csvs[1], "{policy}");
    }
}

#[test]
fn config_error_names_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "mode = synthetic\n[ddqn]\nwidth = 32\nlr = fast\n").unwrap();
    let out = bin().args(["run", "--config", conf.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4"), "{err}");
    assert!(err.contains("ddqn.lr"), "{err}");
}

#[test]
fn unknown_key_and_policy_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "[ddqn]\nwidht = 32\n").unwrap();
    let out = bin().args(["run", "--config", conf.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("widht"));
    let out = bin().args(["run", "--policy", "oracle", "--set", "world.n_arrivals=5", "--out"]).arg(dir.path().join("x")).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown policy"));
}

#[test]
fn environment_overrides_file_and_flags_override_environment() {
    let mut raw = RawConfig::parse("[ddqn]\nlr = 0.1\nbatch = 8\n").unwrap();
    raw.apply_env([("CROWDRL_DDQN_LR".to_string(), "0.2".to_string()), ("CROWDRL_DDQN_BATCH".to_string(), "4".to_string())]);
    raw.apply_override("ddqn.batch=2").unwrap();
    let cfg = ExperimentConfig::resolve(raw).unwrap();
    assert_eq!(cfg.ddqn.worker.learning_rate, 0.2);
    assert_eq!(cfg.ddqn.worker.batch_size, 2);
}

#[test]
fn missing_log_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.log");
    let out = bin().args(["run", "--mode", "replay", "--policy", "random", "--log", missing.to_str().unwrap(), "--out"]).arg(dir.path().join("o")).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.log"));
    assert!(matches!(read_events(&missing), Err(CliError::Io { .. })));
}

#[test]
fn gen_scales_the_sample_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scaled.log");
    run_ok(&["gen", "--base", sample_log().to_str().unwrap(), "--rate", "2", "--quality-noise", "-0.2,0.2", "--seed", "3", "--out", out.to_str().unwrap()]);
    let base = read_events(&sample_log()).unwrap();
    let scaled = read_events(&out).unwrap();
    let arrivals = |ev: &[crowdrl::simulator::Event]| ev.iter().filter(|e| matches!(e.kind, EventKind::WorkerArrival { .. })).count();
    assert_eq!(arrivals(&scaled), 2 * arrivals(&base));
    let summary = run_ok(&["inspect-log", out.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&summary.stdout).contains("integrity: ok"));
}

#[test]
fn gen_without_base_generates_a_world() {
    let cfg = ExperimentConfig::resolve({
        let mut r = RawConfig::default();
        r.apply_override("world.n_arrivals=300").unwrap();
        r.apply_override("world.n_workers=20").unwrap();
        r
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.log");
    std::fs::write(&empty, "").unwrap();
    for base in [None, Some(empty)] {
        let ev = gen_dataset(&GenOptions { base, rate: 1.0, quality_noise: None, seed: 1 }, &cfg.world).unwrap();
        let arrivals = ev.iter().filter(|e| matches!(e.kind, EventKind::WorkerArrival { .. })).count();
        assert_eq!(arrivals, 300);
    }
}

#[test]
fn bench_prints_one_row_per_pool() {
    let out = run_ok(&["bench", "--pool-sizes", "5,20", "--reps", "2", "--width", "16", "--heads", "2"]);
    let s = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = s.lines().collect();
    assert_eq!(lines[0], "pool_size,mean_ms");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("5,") && lines[2].starts_with("20,"));
}

#[test]
fn seeds_fan_out_into_subdirectories() {
    let dir = tempfile::tempdir().unwrap();
    let log = short_log(dir.path(), 150);
    let out = dir.path().join("multi");
    run_ok(&[
        "run",
        "--mode",
        "replay",
        "--policy",
        "greedy-cos",
        "--log",
        log.to_str().unwrap(),
        "--set",
        "sim.warmup_days=0.1",
        "--seeds",
        "1,2",
        "--jobs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    for s in [1, 2] {
        assert!(out.join(format!("seed-{s}/metrics.csv")).is_file());
    }
}

#[test]
fn bundled_config_runs_on_the_sample_log() {
    let dir = tempfile::tempdir().unwrap();
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let out = dir.path().join("sample");
    run_ok(&[
        "run",
        "--config",
        root.join("data/sample.conf").to_str().unwrap(),
        "--log",
        sample_log().to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.lines().all(|l| l.split(',').count() == 8), "{csv}");
    assert!(csv.lines().last().unwrap().starts_with("all,ddqn,"));
}

#[test]
fn preset_is_validated() {
    let err = ExperimentConfig::resolve(RawConfig::parse("[ddqn]\npreset = tiny\n").unwrap()).unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
    let cfg = ExperimentConfig::resolve(RawConfig::parse("[ddqn]\npreset = compact\nlr = 0.01\n").unwrap()).unwrap();
    assert_eq!(cfg.ddqn.width, 32);
    assert_eq!(cfg.ddqn.worker.learning_rate, 0.01);
}
