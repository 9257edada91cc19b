//! Event-driven environment: task lifecycle, worker arrivals, cascade
//! feedback, historical-log replay and a synthetic world generator.
//!
//! Event-log format, one record per line, `#` lines are comments:
//!
//! ```text
//! # time_min,kind,id,attrs...
//! 0,task_created,17,4320,3,1,250        id = task; deadline,category,domain,award
//! 5,worker_arrival,1,42,0.8,17          id = event; worker[,quality[,completed task]]
//! 4321,task_expired,17                  id = task
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{encode_task, encode_worker, record_completion, FeatureSchema, FeatureVector, Minutes, TaskId, TaskRecord, WorkerId, WorkerRecord};
use crate::error::{Error, Result};
use crate::learner::PoolTask;
use crate::metrics::{report, Interaction, InteractionLog, MetricsReport};
use crate::policy::{ActionMode, Arrival, Feedback, TaskPolicy};

pub const LOG_HEADER: &str = "# time_min,kind,id,attrs...\n\
# task_created: id=task id; attrs=deadline_min,category,domain,award\n\
# task_expired: id=task id\n\
# worker_arrival: id=event id; attrs=worker_id[,quality[,completed_task_id]]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    TaskCreated { deadline: Minutes, category: usize, domain: usize, award: f64 },
    TaskExpired,
    WorkerArrival { worker: WorkerId, quality: Option<f64>, completed: Option<TaskId> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: Minutes,
    /// Task id for task events, event id for arrivals.
    pub id: u64,
    pub kind: EventKind,
}

impl Event {
    fn rank(&self) -> u8 {
        match self.kind {
            EventKind::TaskExpired => 0,
            EventKind::TaskCreated { .. } => 1,
            EventKind::WorkerArrival { .. } => 2,
        }
    }

    pub fn to_line(&self) -> String {
        match &self.kind {
            EventKind::TaskCreated { deadline, category, domain, award } => {
                format!("{},task_created,{},{deadline},{category},{domain},{award}", self.time, self.id)
            }
            EventKind::TaskExpired => format!("{},task_expired,{}", self.time, self.id),
            EventKind::WorkerArrival { worker, quality, completed } => {
                let mut s = format!("{},worker_arrival,{},{worker}", self.time, self.id);
                match (quality, completed) {
                    (None, None) => {}
                    (Some(q), None) => s.push_str(&format!(",{q}")),
                    (q, Some(t)) => s.push_str(&format!(",{},{t}", q.map(|q| q.to_string()).unwrap_or_default())),
                }
                s
            }
        }
    }
}

/// Stable sort by time; at equal times expirations precede creations,
/// which precede arrivals.
pub fn sort_events(events: &mut [Event]) {
    events.sort_by_key(|e| (e.time, e.rank()));
}

fn field<T: std::str::FromStr>(parts: &[&str], i: usize, line: usize, what: &str) -> Result<T> {
    let raw = parts.get(i).ok_or_else(|| Error::Parse { line, detail: format!("missing field `{what}`") })?;
    raw.trim().parse().map_err(|_| Error::Parse { line, detail: format!("bad `{what}`: {raw:?}") })
}

fn opt_field<T: std::str::FromStr>(parts: &[&str], i: usize, line: usize, what: &str) -> Result<Option<T>> {
    match parts.get(i).map(|s| s.trim()) {
        None | Some("") => Ok(None),
        Some(_) => field(parts, i, line, what).map(Some),
    }
}

/// Parses an event log, rejecting malformed lines and time regressions.
pub fn parse_events<R: BufRead>(reader: R) -> Result<Vec<Event>> {
    let mut out: Vec<Event> = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let ln = n + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = t.split(',').collect();
        let time: Minutes = field(&parts, 0, ln, "time_min")?;
        let kind = parts.get(1).map(|s| s.trim()).unwrap_or("");
        let id: u64 = field(&parts, 2, ln, "id")?;
        let kind = match kind {
            "task_created" => EventKind::TaskCreated {
                deadline: field(&parts, 3, ln, "deadline_min")?,
                category: field(&parts, 4, ln, "category")?,
                domain: field(&parts, 5, ln, "domain")?,
                award: field(&parts, 6, ln, "award")?,
            },
            "task_expired" => EventKind::TaskExpired,
            "worker_arrival" => EventKind::WorkerArrival {
                worker: field(&parts, 3, ln, "worker_id")?,
                quality: opt_field(&parts, 4, ln, "quality")?,
                completed: opt_field(&parts, 5, ln, "completed_task_id")?,
            },
            other => return Err(Error::Parse { line: ln, detail: format!("unknown event kind {other:?}") }),
        };
        if let Some(prev) = out.last() {
            if time < prev.time {
                return Err(Error::DataIntegrity { event: out.len(), detail: format!("line {ln}: time {time} precedes {}", prev.time) });
            }
        }
        out.push(Event { time, id, kind });
    }
    Ok(out)
}

pub fn write_events<W: Write>(events: &[Event], mut w: W) -> Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for e in events {
        writeln!(w, "{}", e.to_line())?;
    }
    Ok(())
}

/// The historically completed task of each arrival, keyed by event id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayGroundTruth {
    pub completed: HashMap<u64, Option<TaskId>>,
}

impl ReplayGroundTruth {
    pub fn from_events(events: &[Event]) -> Self {
        let completed = events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::WorkerArrival { completed, .. } => Some((e.id, completed)),
                _ => None,
            })
            .collect();
        Self { completed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub schema: FeatureSchema,
    pub mode: ActionMode,
    /// Shown list length in list mode (full ranking when `None`).
    pub list_len: Option<usize>,
    pub quality_p: f64,
    /// `k` of the top-k metrics.
    pub metrics_k: usize,
    /// Replay only: initial span used to initialize features and models.
    pub warmup_minutes: Minutes,
    /// Replay only: completions used to seed a cold-start worker's feature.
    pub prior_completions: usize,
}

impl SimConfig {
    pub fn new(schema: FeatureSchema) -> Self {
        Self { schema, mode: ActionMode::List, list_len: None, quality_p: 2.0, metrics_k: 5, warmup_minutes: 30 * 1440, prior_completions: 5 }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub log: InteractionLog,
    pub report: MetricsReport,
    /// Completions written into task and worker histories after warm-up.
    pub completions_recorded: usize,
    /// Wall-clock milliseconds of each policy feedback call.
    pub update_ms: Vec<f64>,
    pub start: Minutes,
}

/// Mutable platform state shared by replay and synthetic runs.
struct Env {
    schema: FeatureSchema,
    p: f64,
    catalog: HashMap<TaskId, TaskRecord>,
    features: HashMap<TaskId, FeatureVector>,
    active: BTreeMap<TaskId, Minutes>,
    workers: HashMap<WorkerId, WorkerRecord>,
}

impl Env {
    fn new(schema: FeatureSchema, p: f64) -> Self {
        Self { schema, p, catalog: HashMap::new(), features: HashMap::new(), active: BTreeMap::new(), workers: HashMap::new() }
    }

    /// Registers a task that is never offered (synthetic prior history).
    fn add_catalog_task(&mut self, t: TaskRecord) -> Result<()> {
        self.features.insert(t.id, encode_task(&t, &self.schema)?);
        self.catalog.insert(t.id, t);
        Ok(())
    }

    fn expire_before(&mut self, time: Minutes) {
        self.active.retain(|_, &mut deadline| deadline >= time);
    }

    fn apply_task_event(&mut self, idx: usize, e: &Event) -> Result<()> {
        match &e.kind {
            EventKind::TaskCreated { deadline, category, domain, award } => {
                if self.catalog.contains_key(&e.id) {
                    return Err(Error::DataIntegrity { event: idx, detail: format!("task {} created twice", e.id) });
                }
                let t = TaskRecord::new(e.id, e.time, *deadline, *category, *domain, *award)
                    .map_err(|err| Error::DataIntegrity { event: idx, detail: err.to_string() })?;
                self.add_catalog_task(t).map_err(|err| Error::DataIntegrity { event: idx, detail: err.to_string() })?;
                self.active.insert(e.id, *deadline);
            }
            EventKind::TaskExpired => {
                if !self.catalog.contains_key(&e.id) {
                    return Err(Error::DataIntegrity { event: idx, detail: format!("expiry of unknown task {}", e.id) });
                }
                self.active.remove(&e.id);
            }
            EventKind::WorkerArrival { .. } => unreachable!("arrivals handled by the loop"),
        }
        Ok(())
    }

    fn pool(&self) -> Vec<PoolTask> {
        self.active
            .iter()
            .map(|(&id, &deadline)| PoolTask { id, feature: self.features[&id].clone(), deadline, quality: self.catalog[&id].quality })
            .collect()
    }

    fn worker_feature(&self, id: WorkerId) -> Result<FeatureVector> {
        encode_worker(&self.workers[&id], &self.schema, &self.catalog)
    }

    /// Creates or refreshes the worker record; returns whether it is new.
    fn arrive(&mut self, idx: usize, time: Minutes, worker: WorkerId, quality: Option<f64>) -> Result<bool> {
        match self.workers.get_mut(&worker) {
            Some(w) => {
                if let Some(q) = quality {
                    w.quality = q.clamp(0.0, 1.0);
                }
                w.last_arrival = time;
                Ok(false)
            }
            None => {
                let q = quality.ok_or_else(|| Error::DataIntegrity { event: idx, detail: format!("first arrival of worker {worker} lacks a quality") })?;
                let w = WorkerRecord::new(worker, q, time).map_err(|err| Error::DataIntegrity { event: idx, detail: err.to_string() })?;
                self.workers.insert(worker, w);
                Ok(true)
            }
        }
    }

    fn complete(&mut self, worker: WorkerId, task: TaskId, time: Minutes) -> Result<f64> {
        let w = self.workers.get_mut(&worker).expect("arrived worker");
        let t = self.catalog.get_mut(&task).expect("pooled task");
        record_completion(w, t, time, self.p)
    }
}

/// Scans `shown` in order and returns the position of the first task the
/// worker completes, drawing one Bernoulli per examined task.
pub fn cascade_feedback<R: Rng + ?Sized>(completion_probs: &[f64], rng: &mut R) -> Option<usize> {
    completion_probs.iter().position(|&p| p >= 1.0 || (p > 0.0 && rng.gen::<f64>() < p))
}

/// Cascade against a fixed set of interesting tasks.
pub fn cascade_with_set(shown: &[TaskId], interesting: &[TaskId]) -> Option<usize> {
    shown.iter().position(|t| interesting.contains(t))
}

fn validate_ranking(ranked: &[usize], pool_len: usize, idx: usize) -> Result<()> {
    if ranked.is_empty() {
        return Err(Error::DataIntegrity { event: idx, detail: "policy returned no action".into() });
    }
    let mut seen = vec![false; pool_len];
    for &a in ranked {
        if a >= pool_len || std::mem::replace(&mut seen[a], true) {
            return Err(Error::DataIntegrity { event: idx, detail: format!("policy returned invalid action {a}") });
        }
    }
    Ok(())
}

/// Who decides whether a shown task is completed.
enum Responder<'a> {
    Replay(&'a ReplayGroundTruth),
    Behavioral { world: &'a SyntheticWorld, rng: ChaCha8Rng },
}

fn run_loop<P: TaskPolicy + ?Sized>(
    events: &[Event],
    env: &mut Env,
    policy: &mut P,
    cfg: &SimConfig,
    mut responder: Responder<'_>,
    warmup_end: Minutes,
    priors: &HashMap<WorkerId, Vec<TaskId>>,
) -> Result<SimOutcome> {
    let start = events.first().map_or(0, |e| e.time);
    let mut log = InteractionLog::default();
    let mut completions = 0usize;
    let mut update_ms = Vec::new();
    let mut last_time = Minutes::MIN;
    for (idx, e) in events.iter().enumerate() {
        if e.time < last_time {
            return Err(Error::DataIntegrity { event: idx, detail: format!("time {} precedes {last_time}", e.time) });
        }
        last_time = e.time;
        env.expire_before(e.time);
        let EventKind::WorkerArrival { worker, quality, .. } = e.kind else {
            env.apply_task_event(idx, e)?;
            continue;
        };
        let first_visit = env.arrive(idx, e.time, worker, quality)?;
        let warm = e.time < warmup_end;
        if !warm {
            let w = env.workers.get_mut(&worker).expect("just arrived");
            if w.history.is_empty() && w.prior.is_empty() {
                if let Some(p) = priors.get(&worker) {
                    w.prior = p.clone();
                }
            }
        }
        let feature = env.worker_feature(worker)?;
        let q_w = env.workers[&worker].quality;
        let pool = Arc::new(env.pool());
        let arrival = Arrival { time: e.time, worker_id: worker, worker_feature: &feature, worker_quality: q_w, first_visit, pool: &pool };
        policy.observe(&arrival)?;

        let truth = match &responder {
            Responder::Replay(gt) => {
                let t = gt.completed.get(&e.id).copied().flatten();
                if let Some(t) = t {
                    if !env.active.contains_key(&t) {
                        return Err(Error::DataIntegrity { event: idx, detail: format!("ground-truth task {t} is not in the pool at {}", e.time) });
                    }
                }
                t
            }
            Responder::Behavioral { .. } => None,
        };

        if warm {
            if let Some(t) = truth {
                let pos = pool.iter().position(|p| p.id == t).expect("checked above");
                let gain = env.complete(worker, t, e.time)?;
                let after = env.worker_feature(worker)?;
                let next_pool = Arc::new(with_quality(&pool, pos, env.catalog[&t].quality));
                let fb = Feedback { shown: &[pos], completed: Some(0), gain, worker_feature_after: &after, next_pool: &next_pool };
                policy.warm_start(&arrival, &fb)?;
            }
            continue;
        }
        if pool.is_empty() {
            continue;
        }

        let ranked = policy.recommend(&arrival, cfg.mode)?;
        validate_ranking(&ranked, pool.len(), idx)?;
        let shown: Vec<usize> = match cfg.mode {
            ActionMode::Single => vec![ranked[0]],
            ActionMode::List => ranked[..cfg.list_len.unwrap_or(ranked.len()).min(ranked.len())].to_vec(),
        };
        let completed = match &mut responder {
            Responder::Replay(_) => {
                let ids: Vec<TaskId> = shown.iter().map(|&i| pool[i].id).collect();
                cascade_with_set(&ids, truth.as_slice())
            }
            Responder::Behavioral { world, rng } => {
                let model = &world.workers[&worker];
                let probs: Vec<f64> = shown.iter().map(|&i| world.completion_prob(model, &env.catalog[&pool[i].id])).collect();
                cascade_feedback(&probs, rng)
            }
        };

        let (gain, after, next_pool) = match completed {
            Some(pos) => {
                let t = pool[shown[pos]].id;
                let gain = env.complete(worker, t, e.time)?;
                completions += 1;
                let after = env.worker_feature(worker)?;
                let np = Arc::new(with_quality(&pool, shown[pos], env.catalog[&t].quality));
                (gain, after, np)
            }
            None => (0.0, feature.clone(), Arc::clone(&pool)),
        };
        let fb = Feedback { shown: &shown, completed, gain, worker_feature_after: &after, next_pool: &next_pool };
        let t0 = Instant::now();
        policy.feedback(&arrival, &fb)?;
        update_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        log.push(Interaction { time: e.time, list_len: shown.len(), completed_rank: completed.map(|p| p + 1), gain, pool_size: pool.len() });
    }
    let report_start = if warmup_end > start { warmup_end } else { start };
    let report = if log.is_empty() {
        MetricsReport { rows: vec![] }
    } else {
        report(&log, policy.name(), report_start, cfg.metrics_k)?
    };
    Ok(SimOutcome { log, report, completions_recorded: completions, update_ms, start: report_start })
}

fn with_quality(pool: &[PoolTask], pos: usize, quality: f64) -> Vec<PoolTask> {
    let mut next = pool.to_vec();
    next[pos].quality = quality;
    next
}

/// Replays a historical stream. A recommendation succeeds only where the
/// historically completed task appears in the shown list (cascade); the
/// first `warmup_minutes` only initialize histories and models.
pub fn run_replay<P: TaskPolicy + ?Sized>(events: &[Event], truth: &ReplayGroundTruth, policy: &mut P, cfg: &SimConfig) -> Result<SimOutcome> {
    let mut env = Env::new(cfg.schema.clone(), cfg.quality_p);
    // Cold-start seeds: each worker's first completions in the log.
    let mut priors: HashMap<WorkerId, Vec<TaskId>> = HashMap::new();
    let mut attrs: HashMap<TaskId, TaskRecord> = HashMap::new();
    for (i, e) in events.iter().enumerate() {
        match e.kind {
            EventKind::TaskCreated { deadline, category, domain, award } => {
                let t = TaskRecord::new(e.id, e.time, deadline, category, domain, award)
                    .map_err(|err| Error::DataIntegrity { event: i, detail: err.to_string() })?;
                attrs.insert(e.id, t);
            }
            EventKind::WorkerArrival { worker, .. } => {
                if let Some(Some(t)) = truth.completed.get(&e.id) {
                    let p = priors.entry(worker).or_default();
                    if p.len() < cfg.prior_completions {
                        p.push(*t);
                    }
                }
            }
            EventKind::TaskExpired => {}
        }
    }
    // Prior tasks must be resolvable before their creation event; they are
    // registered under a shadow id space so the real ids stay free.
    let mut shadow: HashMap<TaskId, TaskId> = HashMap::new();
    for p in priors.values_mut() {
        for t in p.iter_mut() {
            let Some(rec) = attrs.get(t) else { continue };
            let next = SHADOW_BASE + shadow.len() as u64;
            let sid = *shadow.entry(*t).or_insert(next);
            if !env.catalog.contains_key(&sid) {
                let mut r = rec.clone();
                r.id = sid;
                env.add_catalog_task(r)?;
            }
            *t = sid;
        }
        p.retain(|t| *t >= SHADOW_BASE);
    }
    let warmup_end = events.first().map_or(0, |e| e.time) + cfg.warmup_minutes;
    run_loop(events, &mut env, policy, cfg, Responder::Replay(truth), warmup_end, &priors)
}

/// Ids at or above this are reserved for tasks that only seed features.
pub const SHADOW_BASE: TaskId = 1 << 48;

/// Behavior of one synthetic worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorkerModel {
    /// Interest weight in `[0, 1]` per (category, domain) cell, row-major
    /// by category.
    pub interest: Vec<f64>,
    pub award_sensitivity: f64,
    pub skip: f64,
    pub quality: f64,
    pub mean_return_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub schema: FeatureSchema,
    pub n_workers: usize,
    /// Number of worker arrivals to generate.
    pub n_arrivals: usize,
    /// Mean same-worker return gap in minutes (each worker's own mean is
    /// drawn within +-50% of it).
    pub mean_return_gap: f64,
    /// Task creations per minute.
    pub task_rate: f64,
    /// Tasks present at time 0.
    pub initial_tasks: usize,
    /// Uniform task lifetime range in minutes.
    pub lifetime: (Minutes, Minutes),
    /// `(weight, low, high)` uniform award components.
    pub award_mix: Vec<(f64, f64, f64)>,
    /// Award at which the award factor saturates at 1.
    pub award_ref: f64,
    pub award_sensitivity: f64,
    pub skip: f64,
    /// Each worker cares about exactly one category.
    pub planted: bool,
    pub quality_range: (f64, f64),
    /// Past completions seeding each worker's feature.
    pub prior_tasks: usize,
}

impl WorldConfig {
    /// 20 categories, 200 single-category workers, 10k arrivals, about 30
    /// open tasks; completion odds scale linearly with award up to 1000.
    pub fn planted() -> Self {
        Self {
            schema: FeatureSchema::new(20, 3, vec![10.0, 100.0, 1000.0, 10_000.0], 20).expect("static schema"),
            n_workers: 200,
            n_arrivals: 10_000,
            mean_return_gap: 1440.0,
            task_rate: 1.0 / 480.0,
            initial_tasks: 30,
            lifetime: (7200, 21_600),
            award_mix: vec![(0.6, 10.0, 100.0), (0.3, 100.0, 1000.0), (0.1, 1000.0, 10_000.0)],
            award_ref: 1000.0,
            award_sensitivity: 1.0,
            skip: 0.2,
            planted: true,
            quality_range: (0.1, 1.0),
            prior_tasks: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if self.n_workers == 0 || !(self.mean_return_gap > 0.0) || self.task_rate < 0.0 {
            return Err(Error::Config("world needs workers, a positive return gap and a nonnegative task rate".into()));
        }
        if self.lifetime.0 < 1 || self.lifetime.1 < self.lifetime.0 {
            return Err(Error::Config("task lifetime range must be positive and ordered".into()));
        }
        if self.award_mix.is_empty() || self.award_mix.iter().any(|&(w, lo, hi)| w < 0.0 || lo < 0.0 || hi < lo) {
            return Err(Error::Config("award mixture must have nonnegative weights and ordered ranges".into()));
        }
        if !(0.0..=1.0).contains(&self.skip) {
            return Err(Error::Config("skip probability outside [0,1]".into()));
        }
        let (lo, hi) = self.quality_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || hi < lo {
            return Err(Error::Config("quality range must lie within [0,1]".into()));
        }
        Ok(())
    }
}

/// A generated world: the event stream (without ground truth), each
/// worker's behavior, and the past tasks seeding worker features.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub events: Vec<Event>,
    pub workers: HashMap<WorkerId, SyntheticWorkerModel>,
    pub prior_tasks: Vec<TaskRecord>,
    pub priors: HashMap<WorkerId, Vec<TaskId>>,
}

impl SyntheticWorld {
    pub fn completion_prob(&self, m: &SyntheticWorkerModel, t: &TaskRecord) -> f64 {
        let cell = t.category * self.config.schema.n_domains + t.domain;
        let interest = m.interest.get(cell).copied().unwrap_or(0.0);
        let award = if self.config.award_ref > 0.0 { (t.award / self.config.award_ref).max(0.0).powf(m.award_sensitivity).min(1.0) } else { 1.0 };
        ((1.0 - m.skip) * interest * award).clamp(0.0, 1.0)
    }

    pub fn generate(config: WorldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = config.schema.n_categories * config.schema.n_domains;
        let mut workers = HashMap::new();
        let mut next_arrival: Vec<(Minutes, WorkerId)> = Vec::new();
        for w in 0..config.n_workers as WorkerId {
            let interest = if config.planted {
                let c = rng.gen_range(0..config.schema.n_categories);
                (0..cells).map(|i| if i / config.schema.n_domains == c { 1.0 } else { 0.0 }).collect()
            } else {
                (0..cells).map(|_| rng.gen::<f64>().powi(3)).collect()
            };
            let gap = config.mean_return_gap * rng.gen_range(0.5..1.5);
            let (qlo, qhi) = config.quality_range;
            let model = SyntheticWorkerModel {
                interest,
                award_sensitivity: config.award_sensitivity,
                skip: config.skip,
                quality: if qhi > qlo { rng.gen_range(qlo..=qhi) } else { qlo },
                mean_return_gap: gap,
            };
            next_arrival.push((rng.gen_range(0.0..gap) as Minutes, w));
            workers.insert(w, model);
        }

        // Arrivals: each worker returns after a Gamma(4, gap/4) delay.
        let mut arrivals = Vec::with_capacity(config.n_arrivals);
        let mut heap: std::collections::BinaryHeap<std::cmp::Reverse<(Minutes, WorkerId)>> = next_arrival.into_iter().map(std::cmp::Reverse).collect();
        while arrivals.len() < config.n_arrivals {
            let std::cmp::Reverse((t, w)) = heap.pop().expect("workers exist");
            arrivals.push((t, w));
            let m = &workers[&w];
            let g = Gamma::new(4.0, m.mean_return_gap / 4.0).expect("positive gap").sample(&mut rng).round().max(1.0) as Minutes;
            heap.push(std::cmp::Reverse((t + g, w)));
        }
        let horizon = arrivals.last().map_or(0, |a| a.0);

        let mut events = Vec::new();
        let mut task_id: TaskId = 1;
        let mut make_task = |rng: &mut ChaCha8Rng, created: Minutes, life: Minutes| -> Event {
            let (category, domain) = (rng.gen_range(0..config.schema.n_categories), rng.gen_range(0..config.schema.n_domains));
            let award = draw_award(&config.award_mix, rng);
            let e = Event { time: created, id: task_id, kind: EventKind::TaskCreated { deadline: created + life, category, domain, award } };
            task_id += 1;
            e
        };
        for _ in 0..config.initial_tasks {
            let life = rng.gen_range(1..=config.lifetime.1);
            events.push(make_task(&mut rng, 0, life));
        }
        if config.task_rate > 0.0 {
            let mut t = 0.0;
            loop {
                t += -rng.gen::<f64>().max(1e-300).ln() / config.task_rate;
                if t as Minutes > horizon {
                    break;
                }
                let life = rng.gen_range(config.lifetime.0..=config.lifetime.1);
                events.push(make_task(&mut rng, t as Minutes, life));
            }
        }
        for (i, (t, w)) in arrivals.into_iter().enumerate() {
            events.push(Event { time: t, id: i as u64 + 1, kind: EventKind::WorkerArrival { worker: w, quality: Some(workers[&w].quality), completed: None } });
        }
        sort_events(&mut events);

        // Past completions: tasks drawn from the world's task distribution,
        // accepted by interest alone, so a worker's history mirrors what was
        // abundant rather than what pays.
        let mut world = Self { config, events, workers, prior_tasks: Vec::new(), priors: HashMap::new() };
        let mut prior_id = SHADOW_BASE;
        let ids: Vec<WorkerId> = {
            let mut v: Vec<_> = world.workers.keys().copied().collect();
            v.sort_unstable();
            v
        };
        for w in ids {
            let mut seeds = Vec::new();
            let mut attempts = 0;
            while seeds.len() < world.config.prior_tasks && attempts < 100_000 {
                attempts += 1;
                let cfg = &world.config;
                let t = TaskRecord::new(
                    prior_id,
                    -cfg.lifetime.1 - 1,
                    -1,
                    rng.gen_range(0..cfg.schema.n_categories),
                    rng.gen_range(0..cfg.schema.n_domains),
                    draw_award(&cfg.award_mix, &mut rng),
                )?;
                let interest = world.workers[&w].interest[t.category * cfg.schema.n_domains + t.domain];
                if rng.gen::<f64>() < interest {
                    seeds.push(prior_id);
                    world.prior_tasks.push(t);
                    prior_id += 1;
                }
            }
            world.priors.insert(w, seeds);
        }
        Ok(world)
    }

    /// The stream with a "natural" completion per arrival: the worker
    /// browses the pool in random order and completes the first task the
    /// behavior model accepts. Suitable as a replay log.
    pub fn with_ground_truth(&self, seed: u64) -> Result<Vec<Event>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut active: BTreeMap<TaskId, TaskRecord> = BTreeMap::new();
        let mut out = Vec::with_capacity(self.events.len());
        for e in &self.events {
            active.retain(|_, t| t.deadline >= e.time);
            let mut e = e.clone();
            match &mut e.kind {
                EventKind::TaskCreated { deadline, category, domain, award } => {
                    active.insert(e.id, TaskRecord::new(e.id, e.time, *deadline, *category, *domain, *award)?);
                }
                EventKind::TaskExpired => {
                    active.remove(&e.id);
                }
                EventKind::WorkerArrival { worker, completed, .. } => {
                    let mut order: Vec<&TaskRecord> = active.values().collect();
                    order.shuffle(&mut rng);
                    let m = &self.workers[worker];
                    let probs: Vec<f64> = order.iter().map(|t| self.completion_prob(m, t)).collect();
                    *completed = cascade_feedback(&probs, &mut rng).map(|i| order[i].id);
                }
            }
            out.push(e);
        }
        Ok(out)
    }
}

fn draw_award<R: Rng + ?Sized>(mix: &[(f64, f64, f64)], rng: &mut R) -> f64 {
    let total: f64 = mix.iter().map(|m| m.0).sum();
    let mut u = rng.gen::<f64>() * total;
    for &(w, lo, hi) in mix {
        if u < w {
            return if hi > lo { rng.gen_range(lo..hi) } else { lo };
        }
        u -= w;
    }
    let &(_, lo, _) = mix.last().expect("nonempty mix");
    lo
}

/// Generates a world from `config` and runs `policy` against its behavior
/// model through the same loop as replay.
pub fn run_synthetic<P: TaskPolicy + ?Sized>(world: &SyntheticWorld, policy: &mut P, cfg: &SimConfig, seed: u64) -> Result<SimOutcome> {
    let mut env = Env::new(world.config.schema.clone(), cfg.quality_p);
    for t in &world.prior_tasks {
        env.add_catalog_task(t.clone())?;
    }
    let responder = Responder::Behavioral { world, rng: ChaCha8Rng::seed_from_u64(seed) };
    let start = world.events.first().map_or(0, |e| e.time);
    run_loop(&world.events, &mut env, policy, cfg, responder, start, &world.priors)
}

/// Worker-quality perturbation `N(mean, std)`, clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityNoise {
    pub mean: f64,
    pub std: f64,
}

/// Arrivals drawn with replacement: `round(rate * n)` draws; the first
/// copy of an arrival keeps its time, later copies are shifted by
/// `N(1 day, 1 day)`.
pub fn resample_indices<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Vec<usize> {
    let m = (rate * n as f64).round() as usize;
    if n == 0 {
        return Vec::new();
    }
    (0..m).map(|_| rng.gen_range(0..n)).collect()
}

/// Builds a scaled stream from chosen arrival indices (into the base
/// stream's arrivals). Task events are kept; the result is re-sorted and
/// arrival event ids renumbered.
pub fn assemble_scaled<R: Rng + ?Sized>(base: &[Event], picks: &[usize], noise: Option<QualityNoise>, rng: &mut R) -> Result<Vec<Event>> {
    let arrivals: Vec<&Event> = base.iter().filter(|e| matches!(e.kind, EventKind::WorkerArrival { .. })).collect();
    let mut tasks: HashMap<TaskId, (Minutes, Minutes)> = HashMap::new();
    let mut out: Vec<Event> = Vec::with_capacity(base.len() + picks.len());
    for e in base {
        if let EventKind::TaskCreated { deadline, .. } = e.kind {
            tasks.insert(e.id, (e.time, deadline));
        }
        if !matches!(e.kind, EventKind::WorkerArrival { .. }) {
            out.push(e.clone());
        }
    }
    let shift = Normal::new(1440.0, 1440.0).expect("valid normal");
    let mut per_worker_noise: BTreeMap<WorkerId, f64> = BTreeMap::new();
    let mut used = vec![false; arrivals.len()];
    let mut new_arrivals = Vec::with_capacity(picks.len());
    for &i in picks {
        let src = arrivals.get(i).ok_or_else(|| Error::InvalidInput(format!("arrival index {i} out of range")))?;
        let mut e = (*src).clone();
        if std::mem::replace(&mut used[i], true) {
            let s: f64 = shift.sample(rng);
            e.time += s.round() as Minutes;
        }
        if let EventKind::WorkerArrival { worker, quality, completed } = &mut e.kind {
            if let Some(nz) = noise {
                let d = *per_worker_noise.entry(*worker).or_insert_with(|| Normal::new(nz.mean, nz.std.max(0.0)).map(|n| n.sample(rng)).unwrap_or(nz.mean));
                *quality = quality.map(|q| (q + d).clamp(0.0, 1.0));
            }
            if let Some(t) = *completed {
                match tasks.get(&t) {
                    Some(&(c, d)) if c <= e.time && e.time <= d => {}
                    _ => *completed = None,
                }
            }
        }
        new_arrivals.push(e);
    }
    // Quality must be present on each worker's first (possibly shifted)
    // arrival, so every copy carries it.
    let qualities: HashMap<WorkerId, f64> = arrivals
        .iter()
        .filter_map(|e| match e.kind {
            EventKind::WorkerArrival { worker, quality: Some(q), .. } => Some((worker, q)),
            _ => None,
        })
        .collect();
    for e in &mut new_arrivals {
        if let EventKind::WorkerArrival { worker, quality, .. } = &mut e.kind {
            if quality.is_none() {
                if let Some(&q) = qualities.get(worker) {
                    let d = noise.map_or(0.0, |_| per_worker_noise.get(worker).copied().unwrap_or(0.0));
                    *quality = Some((q + d).clamp(0.0, 1.0));
                }
            }
        }
    }
    out.extend(new_arrivals);
    sort_events(&mut out);
    let mut next_id = 1;
    for e in &mut out {
        if matches!(e.kind, EventKind::WorkerArrival { .. }) {
            e.id = next_id;
            next_id += 1;
        }
    }
    Ok(out)
}

/// Resamples the arrivals of `base` at `rate` and perturbs qualities.
pub fn generate_scaled_dataset<R: Rng + ?Sized>(base: &[Event], rate: f64, noise: Option<QualityNoise>, rng: &mut R) -> Result<Vec<Event>> {
    if !(rate > 0.0) {
        return Err(Error::InvalidInput(format!("sampling rate {rate} must be positive")));
    }
    let n = base.iter().filter(|e| matches!(e.kind, EventKind::WorkerArrival { .. })).count();
    let picks = resample_indices(n, rate, rng);
    assemble_scaled(base, &picks, noise, rng)
}
