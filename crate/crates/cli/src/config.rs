//! Flat `key = value` experiment configuration with `[section]` headers.
//!
//! ```text
//! policy = ddqn
//! seed = 3
//! [ddqn]
//! gamma_w = 0.3
//! ```
//!
//! Precedence: file < `CROWDRL_<SECTION>_<KEY>` environment variables <
//! command-line overrides.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crowdrl::agent::DdqnConfig;
use crowdrl::baselines::GreedyNnConfig;
use crowdrl::domain::FeatureSchema;
use crowdrl::policy::{ActionMode, Schedule};
use crowdrl::requester::FutureMode;
use crowdrl::simulator::{SimConfig, WorldConfig};
use crowdrl::tensor::OptimizerKind;

use crate::CliError;

pub const ENV_PREFIX: &str = "CROWDRL_";
const SECTIONS: [&str; 5] = ["schema", "sim", "ddqn", "world", "baselines"];

/// Where a raw value came from, for error messages.
#[derive(Debug, Clone, PartialEq)]
pub enum Origin {
    Line(usize),
    Env(String),
    Flag,
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Env(v) => write!(f, "environment variable {v}"),
            Origin::Flag => write!(f, "command-line override"),
        }
    }
}

/// Unresolved `section.key -> value` entries.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, (String, Origin)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut raw = Self::default();
        let mut section = String::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| CliError::Config { at: Origin::Line(n), detail: "unterminated section header".into() })?.trim();
                if !SECTIONS.contains(&name) {
                    return Err(CliError::Config { at: Origin::Line(n), detail: format!("unknown section [{name}]") });
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CliError::Config { at: Origin::Line(n), detail: format!("expected `key = value`, got {line:?}") })?;
            let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
            raw.entries.insert(key, (v.trim().to_string(), Origin::Line(n)));
        }
        Ok(raw)
    }

    /// Applies `CROWDRL_*` variables; `CROWDRL_DDQN_GAMMA_W` sets
    /// `ddqn.gamma_w`, `CROWDRL_SEED` sets `seed`.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
            let rest = rest.to_ascii_lowercase();
            let key = match rest.split_once('_') {
                Some((sec, k)) if SECTIONS.contains(&sec) => format!("{sec}.{k}"),
                _ => rest,
            };
            self.entries.insert(key, (value, Origin::Env(name)));
        }
    }

    /// `section.key=value` (or `key=value`) from the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Config { at: Origin::Flag, detail: format!("override {kv:?} is not key=value") })?;
        self.entries.insert(k.trim().to_string(), (v.trim().to_string(), Origin::Flag));
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (value.into(), Origin::Flag));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Replay,
    Synthetic,
}

impl FromStr for RunMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "replay" => Ok(RunMode::Replay),
            "synthetic" => Ok(RunMode::Synthetic),
            _ => Err("expected replay or synthetic".into()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub mode: RunMode,
    pub policy: String,
    pub seed: u64,
    pub log: Option<PathBuf>,
    pub out: PathBuf,
    pub sim: SimConfig,
    pub ddqn: DdqnConfig,
    pub world: WorldConfig,
    pub linucb_alpha: f64,
    pub greedy_nn: GreedyNnConfig,
    /// Canonical `key = value` lines of every resolved field, sorted.
    pub resolved: String,
}

/// Consumes entries, remembering the final value of every key.
struct Resolver {
    raw: BTreeMap<String, (String, Origin)>,
    seen: BTreeMap<String, String>,
}

impl Resolver {
    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, CliError>
    where
        T: ToString,
    {
        let v = match self.raw.remove(key) {
            None => default,
            Some((text, at)) => text.parse().map_err(|_| CliError::Config { at, detail: format!("bad value {text:?} for `{key}`") })?,
        };
        self.seen.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    fn get_with<T>(&mut self, key: &str, default: T, show: impl Fn(&T) -> String, parse: impl Fn(&str) -> Option<T>) -> Result<T, CliError> {
        let v = match self.raw.remove(key) {
            None => default,
            Some((text, at)) => parse(&text).ok_or_else(|| CliError::Config { at, detail: format!("bad value {text:?} for `{key}`") })?,
        };
        self.seen.insert(key.to_string(), show(&v));
        Ok(v)
    }

    fn list(&mut self, key: &str, default: Vec<f64>) -> Result<Vec<f64>, CliError> {
        self.get_with(
            key,
            default,
            |v| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
            |s| s.split(',').map(|x| x.trim().parse().ok()).collect(),
        )
    }

    fn opt_usize(&mut self, key: &str, default: Option<usize>) -> Result<Option<usize>, CliError> {
        self.get_with(
            key,
            default,
            |v| v.map(|x| x.to_string()).unwrap_or_else(|| "none".into()),
            |s| if s == "none" || s.is_empty() { Some(None) } else { s.parse().ok().map(Some) },
        )
    }

    fn finish(self) -> Result<String, CliError> {
        if let Some((k, (_, at))) = self.raw.into_iter().next() {
            return Err(CliError::Config { at, detail: format!("unknown key `{k}`") });
        }
        Ok(self.seen.iter().map(|(k, v)| format!("{k} = {v}\n")).collect())
    }
}

fn optimizer_name(o: &OptimizerKind) -> String {
    match o {
        OptimizerKind::Sgd => "sgd".into(),
        OptimizerKind::Adam => "adam".into(),
    }
}

fn mode_name(m: &ActionMode) -> String {
    match m {
        ActionMode::Single => "single".into(),
        ActionMode::List => "list".into(),
    }
}

impl ExperimentConfig {
    pub fn resolve(raw: RawConfig) -> Result<Self, CliError> {
        let mut r = Resolver { raw: raw.entries, seen: BTreeMap::new() };
        let mode = r.get_with("mode", RunMode::Synthetic, |m| if *m == RunMode::Replay { "replay".into() } else { "synthetic".into() }, |s| s.parse().ok())?;
        let policy: String = r.get("policy", "ddqn".to_string())?;
        let seed: u64 = r.get("seed", 0)?;
        let log = r.get_with("log", None::<PathBuf>, |p| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default(), |s| Some(Some(PathBuf::from(s))))?;
        let out = r.get_with("out", PathBuf::from("runs/out"), |p| p.display().to_string(), |s| Some(PathBuf::from(s)))?;

        let d = FeatureSchema::default();
        let schema = FeatureSchema::new(
            r.get("schema.n_categories", d.n_categories)?,
            r.get("schema.n_domains", d.n_domains)?,
            r.list("schema.award_bin_edges", d.award_bin_edges.clone())?,
            r.get("schema.history_window", d.history_window)?,
        )
        .map_err(|e| CliError::Config { at: Origin::Flag, detail: e.to_string() })?;

        let sd = SimConfig::new(schema.clone());
        let sim = SimConfig {
            mode: r.get_with("sim.action_mode", ActionMode::Single, mode_name, |s| s.parse().ok())?,
            list_len: r.opt_usize("sim.list_len", sd.list_len)?,
            quality_p: r.get("sim.quality_p", sd.quality_p)?,
            metrics_k: r.get("sim.metrics_k", sd.metrics_k)?,
            warmup_minutes: (r.get::<f64>("sim.warmup_days", sd.warmup_minutes as f64 / 1440.0)? * 1440.0).round() as i64,
            prior_completions: r.get("sim.prior_completions", sd.prior_completions)?,
            schema: schema.clone(),
        };

        // `compact` swaps the starting values of every ddqn.* key below
        let compact = r.get_with("ddqn.preset", false, |c| if *c { "compact".into() } else { "default".into() }, |s| match s {
            "default" => Some(false),
            "compact" => Some(true),
            _ => None,
        })?;
        let mut dq = if compact { DdqnConfig::compact(schema.dim()) } else { DdqnConfig::new(schema.dim()) };
        dq.width = r.get("ddqn.width", dq.width)?;
        dq.heads = r.get("ddqn.heads", dq.heads)?;
        dq.second_residual = r.get("ddqn.second_residual", dq.second_residual)?;
        dq.max_t = r.get("ddqn.max_t", dq.max_t)?;
        dq.policy.balance_weight = r.get("ddqn.w", dq.policy.balance_weight)?;
        dq.policy.epsilon = Schedule::new(
            r.get("ddqn.epsilon_start", dq.policy.epsilon.start)?,
            r.get("ddqn.epsilon_end", dq.policy.epsilon.end)?,
            r.get("ddqn.epsilon_steps", dq.policy.epsilon.steps)?,
        );
        dq.policy.list_epsilon = r.get("ddqn.list_epsilon", dq.policy.list_epsilon)?;
        dq.policy.decay = Schedule::new(
            r.get("ddqn.decay_start", dq.policy.decay.start)?,
            r.get("ddqn.decay_end", dq.policy.decay.end)?,
            r.get("ddqn.decay_steps", dq.policy.decay.steps)?,
        );
        dq.policy.mode = sim.mode;
        dq.policy.list_len = sim.list_len;
        dq.worker.gamma = r.get("ddqn.gamma_w", dq.worker.gamma)?;
        dq.requester.gamma = r.get("ddqn.gamma_r", dq.requester.gamma)?;
        let lr = r.get("ddqn.lr", dq.worker.learning_rate)?;
        let batch = r.get("ddqn.batch", dq.worker.batch_size)?;
        let buffer = r.get("ddqn.buffer", dq.worker.buffer_capacity)?;
        let copy = r.get("ddqn.target_copy_every", dq.worker.target_copy_every)?;
        let alpha = r.get("ddqn.priority_alpha", dq.worker.priority_alpha)?;
        let eps = r.get("ddqn.priority_eps", dq.worker.priority_eps)?;
        let opt = r.get_with("ddqn.optimizer", dq.worker.optimizer, optimizer_name, |s| s.parse().ok())?;
        for l in [&mut dq.worker, &mut dq.requester] {
            l.learning_rate = lr;
            l.batch_size = batch;
            l.buffer_capacity = buffer;
            l.target_copy_every = copy;
            l.priority_alpha = alpha;
            l.priority_eps = eps;
            l.optimizer = opt;
        }
        dq.worker.min_future_mass = r.get("ddqn.min_future_mass_w", dq.worker.min_future_mass)?;
        dq.requester.min_future_mass = r.get("ddqn.min_future_mass_r", dq.requester.min_future_mass)?;
        dq.future_mode = r.get_with(
            "ddqn.future_mode",
            dq.future_mode,
            |m| if matches!(m, FutureMode::Expectation) { "expectation".into() } else { "exact".into() },
            |s| match s {
                "expectation" => Some(FutureMode::Expectation),
                "exact" => Some(FutureMode::exact_default()),
                _ => None,
            },
        )?;
        dq.train_every = r.get("ddqn.train_every", dq.train_every)?;
        dq.train_start = r.get("ddqn.train_start", dq.train_start)?;
        dq.seed = seed;

        let wd = WorldConfig::planted();
        let lifetime = (r.get("world.lifetime_min", wd.lifetime.0)?, r.get("world.lifetime_max", wd.lifetime.1)?);
        let quality_range = (r.get("world.quality_min", wd.quality_range.0)?, r.get("world.quality_max", wd.quality_range.1)?);
        let world = WorldConfig {
            schema: schema.clone(),
            n_workers: r.get("world.n_workers", wd.n_workers)?,
            n_arrivals: r.get("world.n_arrivals", wd.n_arrivals)?,
            mean_return_gap: r.get("world.mean_return_gap", wd.mean_return_gap)?,
            task_rate: r.get("world.task_rate", wd.task_rate)?,
            initial_tasks: r.get("world.initial_tasks", wd.initial_tasks)?,
            lifetime,
            award_mix: wd.award_mix.clone(),
            award_ref: r.get("world.award_ref", wd.award_ref)?,
            award_sensitivity: r.get("world.award_sensitivity", wd.award_sensitivity)?,
            skip: r.get("world.skip", wd.skip)?,
            planted: r.get("world.planted", wd.planted)?,
            quality_range,
            prior_tasks: r.get("world.prior_tasks", wd.prior_tasks)?,
        };

        let nd = GreedyNnConfig::default();
        let greedy_nn = GreedyNnConfig {
            hidden: [r.get("baselines.nn_hidden1", nd.hidden[0])?, r.get("baselines.nn_hidden2", nd.hidden[1])?],
            epochs: r.get("baselines.nn_epochs", nd.epochs)?,
            batch_size: r.get("baselines.nn_batch", nd.batch_size)?,
            learning_rate: r.get("baselines.nn_lr", nd.learning_rate)?,
            optimizer: nd.optimizer,
        };
        let linucb_alpha = r.get("baselines.linucb_alpha", 0.5)?;
        let resolved = r.finish()?;

        dq.policy.validate().map_err(|e| CliError::Config { at: Origin::Flag, detail: e.to_string() })?;
        world.validate().map_err(|e| CliError::Config { at: Origin::Flag, detail: e.to_string() })?;
        if mode == RunMode::Replay && log.is_none() {
            return Err(CliError::Config { at: Origin::Flag, detail: "replay mode needs `log`".into() });
        }
        Ok(Self { mode, policy, seed, log, out, sim, ddqn: dq, world, linucb_alpha, greedy_nn, resolved })
    }
}
