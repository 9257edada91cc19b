//! Experiment orchestration behind the `crowdrl` binary.

pub mod config;

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crowdrl::agent::DdqnAgent;
use crowdrl::baselines::{GreedyCosinePolicy, GreedyNnPolicy, LinUcbPolicy, RandomPolicy};
use crowdrl::bench::{bench_update_latency, latency_csv, BenchConfig};
use crowdrl::policy::TaskPolicy;
use crowdrl::simulator::{
    generate_scaled_dataset, parse_events, run_replay, run_synthetic, write_events, Event, EventKind, QualityNoise, ReplayGroundTruth, SimOutcome,
    SyntheticWorld,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use config::{ExperimentConfig, Origin, RunMode};

pub const POLICIES: [&str; 6] = ["ddqn", "random", "greedy-cos", "greedy-cos-r", "greedy-nn", "linucb"];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at {at}: {detail}")]
    Config { at: Origin, detail: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] crowdrl::Error),
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

pub fn read_events(path: &Path) -> Result<Vec<Event>, CliError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    Ok(parse_events(BufReader::new(f))?)
}

pub fn save_events(events: &[Event], path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    write_events(events, &mut w)?;
    w.flush().map_err(io_err(path))
}

/// Builds the named policy for `cfg`.
pub fn build_policy(cfg: &ExperimentConfig) -> Result<Box<dyn TaskPolicy>, CliError> {
    let dim = cfg.sim.schema.dim();
    let p: Box<dyn TaskPolicy> = match cfg.policy.as_str() {
        "ddqn" => Box::new(DdqnAgent::new(cfg.ddqn.clone())?),
        "random" => Box::new(RandomPolicy::new(cfg.seed)),
        "greedy-cos" => Box::new(GreedyCosinePolicy { requester: false, p: cfg.sim.quality_p }),
        "greedy-cos-r" => Box::new(GreedyCosinePolicy { requester: true, p: cfg.sim.quality_p }),
        "greedy-nn" => Box::new(GreedyNnPolicy::new(dim, cfg.greedy_nn.clone(), false, cfg.seed)?),
        "linucb" => Box::new(LinUcbPolicy::new(dim, cfg.linucb_alpha, false)),
        other => return Err(CliError::Usage(format!("unknown policy `{other}`; expected one of {}", POLICIES.join(", ")))),
    };
    Ok(p)
}

pub fn config_hash(resolved: &str) -> String {
    Sha256::digest(resolved.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Runs one experiment and writes `metrics.csv`, `latency.csv`,
/// `manifest.json` and (for the learned policy) `checkpoint/` into
/// `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<SimOutcome, CliError> {
    let t0 = Instant::now();
    let mut agent = if cfg.policy == "ddqn" { Some(DdqnAgent::new(cfg.ddqn.clone())?) } else { None };
    let mut other = if agent.is_none() { Some(build_policy(cfg)?) } else { None };
    let policy: &mut dyn TaskPolicy = match (&mut agent, &mut other) {
        (Some(a), _) => a,
        (None, Some(o)) => o.as_mut(),
        (None, None) => unreachable!("one policy is built"),
    };
    let outcome = match cfg.mode {
        RunMode::Replay => {
            let path = cfg.log.as_ref().expect("validated");
            let events = read_events(path)?;
            let truth = ReplayGroundTruth::from_events(&events);
            run_replay(&events, &truth, policy, &cfg.sim)?
        }
        RunMode::Synthetic => {
            let world = SyntheticWorld::generate(cfg.world.clone(), cfg.seed)?;
            run_synthetic(&world, policy, &cfg.sim, cfg.seed.wrapping_add(1))?
        }
    };
    let out = &cfg.out;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let csv = out.join("metrics.csv");
    fs::write(&csv, outcome.report.to_csv()).map_err(io_err(&csv))?;
    let lat = out.join("latency.csv");
    let mut s = String::from("update,ms\n");
    for (i, ms) in outcome.update_ms.iter().enumerate() {
        s.push_str(&format!("{i},{ms:.4}\n"));
    }
    fs::write(&lat, s).map_err(io_err(&lat))?;
    if let Some(agent) = &agent {
        agent.save(out.join("checkpoint"))?;
    }
    let manifest = serde_json::json!({
        "policy": cfg.policy,
        "seed": cfg.seed,
        "config_hash": config_hash(&cfg.resolved),
        "config": cfg.resolved,
        "git_revision": git_revision(),
        "crate_version": env!("CARGO_PKG_VERSION"),
        "wall_clock_s": t0.elapsed().as_secs_f64(),
        "interactions": outcome.log.len(),
        "completions": outcome.completions_recorded,
    });
    let mpath = out.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest).expect("plain json")).map_err(io_err(&mpath))?;
    Ok(outcome)
}

/// Options of the `gen` subcommand.
#[derive(Debug, Clone)]
pub struct GenOptions {
    pub base: Option<PathBuf>,
    pub rate: f64,
    pub quality_noise: Option<QualityNoise>,
    pub seed: u64,
}

/// Scales `base` when it has arrivals; otherwise generates a synthetic
/// stream (with natural ground truth) from `world` and scales that.
pub fn gen_dataset(opts: &GenOptions, world: &crowdrl::simulator::WorldConfig) -> Result<Vec<Event>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let base = match &opts.base {
        Some(p) => read_events(p)?,
        None => Vec::new(),
    };
    let has_arrivals = base.iter().any(|e| matches!(e.kind, EventKind::WorkerArrival { .. }));
    let base = if has_arrivals {
        base
    } else {
        let w = SyntheticWorld::generate(world.clone(), opts.seed)?;
        w.with_ground_truth(opts.seed.wrapping_add(1))?
    };
    if opts.rate == 1.0 && opts.quality_noise.is_none() {
        return Ok(base);
    }
    Ok(generate_scaled_dataset(&base, opts.rate, opts.quality_noise, &mut rng)?)
}

pub fn parse_noise(s: &str) -> Result<QualityNoise, CliError> {
    let parts: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| CliError::Usage(format!("quality noise {s:?} is not `mean,std`")))?;
    match parts[..] {
        [mean, std] if std >= 0.0 => Ok(QualityNoise { mean, std }),
        _ => Err(CliError::Usage(format!("quality noise {s:?} is not `mean,std` with std >= 0"))),
    }
}

pub fn run_bench(pool_sizes: &[usize], reps: usize, cfg: &BenchConfig) -> Result<String, CliError> {
    Ok(latency_csv(&bench_update_latency(pool_sizes, reps, cfg)?))
}

/// Summary of an event log plus integrity checks.
pub fn inspect_log(path: &Path) -> Result<String, CliError> {
    let events = read_events(path)?;
    let (mut created, mut expired, mut arrivals, mut completions) = (0, 0, 0, 0);
    let mut workers = std::collections::BTreeSet::new();
    let mut active: std::collections::BTreeMap<u64, i64> = Default::default();
    let mut max_pool = 0;
    let mut problems = Vec::new();
    for (i, e) in events.iter().enumerate() {
        active.retain(|_, d| *d >= e.time);
        match e.kind {
            EventKind::TaskCreated { deadline, .. } => {
                created += 1;
                active.insert(e.id, deadline);
            }
            EventKind::TaskExpired => {
                expired += 1;
                active.remove(&e.id);
            }
            EventKind::WorkerArrival { worker, completed, .. } => {
                arrivals += 1;
                workers.insert(worker);
                max_pool = max_pool.max(active.len());
                if let Some(t) = completed {
                    completions += 1;
                    if !active.contains_key(&t) && problems.len() < 5 {
                        problems.push(format!("event {i}: completed task {t} not active"));
                    }
                }
            }
        }
    }
    let span = match (events.first(), events.last()) {
        (Some(a), Some(b)) => b.time - a.time,
        _ => 0,
    };
    let mut s = format!(
        "events: {}\ntasks created: {created}\nexplicit expirations: {expired}\narrivals: {arrivals}\ndistinct workers: {}\nground-truth completions: {completions}\nspan: {span} min ({:.1} days)\nmax pool at an arrival: {max_pool}\n",
        events.len(),
        workers.len(),
        span as f64 / 1440.0
    );
    if problems.is_empty() {
        s.push_str("integrity: ok\n");
    } else {
        s.push_str(&format!("integrity: {} problem(s)\n", problems.len()));
        for p in problems {
            s.push_str(&format!("  {p}\n"));
        }
    }
    Ok(s)
}
