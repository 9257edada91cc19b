use std::path::PathBuf;
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand};
use crowdrl::bench::BenchConfig;
use crowdrl_cli::config::{ExperimentConfig, RawConfig};
use crowdrl_cli::{gen_dataset, inspect_log, parse_noise, run_bench, run_experiment, save_events, CliError, GenOptions};

/// Task-arrangement experiments: run policies, time updates, make logs.
///
/// Any config key can also be set through `CROWDRL_<SECTION>_<KEY>`
/// (e.g. `CROWDRL_DDQN_LR=0.003`, `CROWDRL_SEED=4`); command-line flags
/// win over the environment, which wins over the file.
#[derive(Parser)]
#[command(name = "crowdrl", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment (or several seeds) and write its artifacts.
    Run(RunArgs),
    /// Time one learning update across pool sizes.
    Bench(BenchArgs),
    /// Write an event log: scale an existing one or generate a synthetic one.
    Gen(GenArgs),
    /// Summarize and check an event log.
    InspectLog { path: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    /// Config file (key = value lines with [sections]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// ddqn, random, greedy-cos, greedy-cos-r, greedy-nn or linucb.
    #[arg(long)]
    policy: Option<String>,
    /// replay or synthetic.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds; each runs in its own process under
    /// `<out>/seed-<s>`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Processes to run at once with --seeds.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// `section.key=value` overrides, repeatable.
    #[arg(long = "set")]
    set: Vec<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "10,100,500,1000,5000")]
    pool_sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    /// Log to resample; a synthetic stream is generated when absent or empty.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Arrival sampling rate relative to the base.
    #[arg(long, default_value_t = 1.0)]
    rate: f64,
    /// Per-worker quality shift `mean,std`, e.g. " -0.2,0.2".
    #[arg(long, allow_hyphen_values = true)]
    quality_noise: Option<String>,
    /// Arrivals of the synthetic fallback.
    #[arg(long)]
    arrivals: Option<usize>,
    /// Config whose [world] and [schema] sections drive the fallback.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn load_raw(path: Option<&PathBuf>) -> Result<RawConfig, CliError> {
    let mut raw = match path {
        Some(p) => RawConfig::parse(&std::fs::read_to_string(p).map_err(|source| CliError::Io { path: p.clone(), source })?)?,
        None => RawConfig::default(),
    };
    raw.apply_env(std::env::vars());
    Ok(raw)
}

fn run(args: RunArgs) -> Result<(), CliError> {
    let mut raw = load_raw(args.config.as_ref())?;
    for (key, v) in [("policy", args.policy.clone()), ("mode", args.mode.clone())] {
        if let Some(v) = v {
            raw.set(key, v);
        }
    }
    if let Some(p) = &args.log {
        raw.set("log", p.display().to_string());
    }
    if let Some(p) = &args.out {
        raw.set("out", p.display().to_string());
    }
    if let Some(s) = args.seed {
        raw.set("seed", s.to_string());
    }
    for kv in &args.set {
        raw.apply_override(kv)?;
    }
    if args.seeds.len() > 1 {
        return fan_out(&args, raw);
    }
    if let Some(&s) = args.seeds.first() {
        raw.set("seed", s.to_string());
    }
    let cfg = ExperimentConfig::resolve(raw)?;
    let outcome = run_experiment(&cfg)?;
    print!("{}", outcome.report.to_csv());
    eprintln!("wrote {}", cfg.out.display());
    Ok(())
}

/// Re-invokes this binary once per seed, `jobs` at a time.
fn fan_out(args: &RunArgs, raw: RawConfig) -> Result<(), CliError> {
    let base = ExperimentConfig::resolve(raw)?;
    let exe = std::env::current_exe().map_err(|source| CliError::Io { path: PathBuf::from("crowdrl"), source })?;
    let jobs = args.jobs.max(1);
    let mut pending = args.seeds.iter().copied();
    let mut running: Vec<(u64, std::process::Child)> = Vec::new();
    let mut failed = Vec::new();
    loop {
        while running.len() < jobs {
            let Some(seed) = pending.next() else { break };
            let mut cmd = Command::new(&exe);
            cmd.arg("run");
            if let Some(c) = &args.config {
                cmd.arg("--config").arg(c);
            }
            for (flag, v) in [("--policy", Some(base.policy.clone())), ("--mode", args.mode.clone())] {
                if let Some(v) = v {
                    cmd.arg(flag).arg(v);
                }
            }
            if let Some(l) = &args.log {
                cmd.arg("--log").arg(l);
            }
            for kv in &args.set {
                cmd.arg("--set").arg(kv);
            }
            cmd.arg("--seed").arg(seed.to_string()).arg("--out").arg(base.out.join(format!("seed-{seed}")));
            cmd.stdout(std::process::Stdio::null());
            let child = cmd.spawn().map_err(|source| CliError::Io { path: exe.clone(), source })?;
            running.push((seed, child));
        }
        if running.is_empty() {
            break;
        }
        let (seed, mut child) = running.remove(0);
        let status = child.wait().map_err(|source| CliError::Io { path: exe.clone(), source })?;
        if !status.success() {
            failed.push(seed);
        }
    }
    if failed.is_empty() {
        eprintln!("wrote {} seed runs under {}", args.seeds.len(), base.out.display());
        Ok(())
    } else {
        Err(CliError::Usage(format!("seed runs failed: {failed:?}")))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = match Cli::parse().cmd {
        Cmd::Run(args) => run(args),
        Cmd::Bench(a) => {
            let cfg = BenchConfig { width: a.width, heads: a.heads, seed: a.seed, ..BenchConfig::default() };
            run_bench(&a.pool_sizes, a.reps, &cfg).and_then(|csv| match &a.out {
                Some(p) => std::fs::write(p, csv).map_err(|source| CliError::Io { path: p.clone(), source }),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            })
        }
        Cmd::Gen(a) => (|| {
            let mut raw = load_raw(a.config.as_ref())?;
            if let Some(n) = a.arrivals {
                raw.set("world.n_arrivals", n.to_string());
            }
            let cfg = ExperimentConfig::resolve(raw)?;
            let noise = a.quality_noise.as_deref().map(parse_noise).transpose()?;
            let events = gen_dataset(&GenOptions { base: a.base.clone(), rate: a.rate, quality_noise: noise, seed: a.seed }, &cfg.world)?;
            save_events(&events, &a.out)?;
            eprintln!("wrote {} events to {}", events.len(), a.out.display());
            Ok(())
        })(),
        Cmd::InspectLog { path } => inspect_log(&path).map(|s| print!("{s}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
