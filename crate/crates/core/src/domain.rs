//! Tasks, workers and their feature encodings.
//!
//! A task is encoded as `[one-hot(category) | one-hot(domain) | one-hot(award bin)]`.
//! A worker is encoded as the mean encoding of the tasks they completed most
//! recently, so each of the three blocks of a worker feature is a
//! distribution summing to one (or all zero for a worker without history).

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::requester::task_quality;

pub type TaskId = u64;
pub type WorkerId = u64;
/// Integer minutes since the epoch of the event stream.
pub type Minutes = i64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: TaskId,
    pub created_at: Minutes,
    pub deadline: Minutes,
    pub category: usize,
    pub domain: usize,
    pub award: f64,
    pub quality: f64,
    pub completions: Vec<(Minutes, WorkerId)>,
    /// Quality of each completer, parallel to `completions`.
    pub completer_qualities: Vec<f64>,
}

impl TaskRecord {
    pub fn new(
        id: TaskId,
        created_at: Minutes,
        deadline: Minutes,
        category: usize,
        domain: usize,
        award: f64,
    ) -> Result<Self> {
        if deadline <= created_at {
            return Err(Error::InvalidInput(format!(
                "task {id}: deadline {deadline} not after creation {created_at}"
            )));
        }
        if !(award >= 0.0) || !award.is_finite() {
            return Err(Error::InvalidInput(format!("task {id}: award {award} must be finite and nonnegative")));
        }
        Ok(Self {
            id,
            created_at,
            deadline,
            category,
            domain,
            award,
            quality: 0.0,
            completions: Vec::new(),
            completer_qualities: Vec::new(),
        })
    }

    /// A task is available from its creation through its deadline, inclusive.
    pub fn is_active(&self, time: Minutes) -> bool {
        self.created_at <= time && time <= self.deadline
    }

    /// Quality gain a completer of quality `q` would add under exponent `p`.
    pub fn gain_if_completed_by(&self, q: f64, p: f64) -> Result<f64> {
        let mut qs = self.completer_qualities.clone();
        qs.push(q);
        Ok(task_quality(&qs, p)? - self.quality)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerRecord {
    pub id: WorkerId,
    pub quality: f64,
    pub history: Vec<(Minutes, TaskId)>,
    /// Tasks used only to initialize the feature of a cold-start worker.
    /// They precede `history` when the recent window is taken.
    pub prior: Vec<TaskId>,
    pub last_arrival: Minutes,
}

impl WorkerRecord {
    pub fn new(id: WorkerId, quality: f64, first_arrival: Minutes) -> Result<Self> {
        if !(0.0..=1.0).contains(&quality) {
            return Err(Error::InvalidInput(format!("worker {id}: quality {quality} outside [0,1]")));
        }
        Ok(Self { id, quality, history: Vec::new(), prior: Vec::new(), last_arrival: first_arrival })
    }

    fn recent_tasks(&self, window: usize) -> impl Iterator<Item = TaskId> + '_ {
        let all = self.prior.len() + self.history.len();
        let skip = all.saturating_sub(window);
        self.prior.iter().copied().chain(self.history.iter().map(|&(_, t)| t)).skip(skip)
    }
}

/// Fixes the discretization of task attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub n_categories: usize,
    pub n_domains: usize,
    pub award_bin_edges: Vec<f64>,
    pub history_window: usize,
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self {
            n_categories: 20,
            n_domains: 3,
            award_bin_edges: vec![10.0, 100.0, 1000.0, 10000.0],
            history_window: 20,
        }
    }
}

impl FeatureSchema {
    pub fn new(n_categories: usize, n_domains: usize, award_bin_edges: Vec<f64>, history_window: usize) -> Result<Self> {
        let schema = Self { n_categories, n_domains, award_bin_edges, history_window };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_categories == 0 || self.n_domains == 0 || self.history_window == 0 {
            return Err(Error::Config("schema cardinalities and history_window must be positive".into()));
        }
        if self.award_bin_edges.is_empty() {
            return Err(Error::Config("award_bin_edges must be nonempty".into()));
        }
        if self.award_bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("award_bin_edges must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn n_award_bins(&self) -> usize {
        self.award_bin_edges.len() + 1
    }

    /// Length of a task (and worker) feature vector.
    pub fn dim(&self) -> usize {
        self.n_categories + self.n_domains + self.n_award_bins()
    }

    /// Bin index: the number of edges that are `<= award`.
    pub fn award_bin(&self, award: f64) -> usize {
        self.award_bin_edges.partition_point(|&e| e <= award)
    }

    /// `(offset, len)` of the category, domain and award blocks.
    pub fn blocks(&self) -> [(usize, usize); 3] {
        [
            (0, self.n_categories),
            (self.n_categories, self.n_domains),
            (self.n_categories + self.n_domains, self.n_award_bins()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

/// Resolves task ids to records.
pub trait TaskLookup {
    fn lookup(&self, id: TaskId) -> Option<&TaskRecord>;
}

impl TaskLookup for HashMap<TaskId, TaskRecord> {
    fn lookup(&self, id: TaskId) -> Option<&TaskRecord> {
        self.get(&id)
    }
}

impl TaskLookup for BTreeMap<TaskId, TaskRecord> {
    fn lookup(&self, id: TaskId) -> Option<&TaskRecord> {
        self.get(&id)
    }
}

pub fn encode_task(task: &TaskRecord, schema: &FeatureSchema) -> Result<FeatureVector> {
    if task.category >= schema.n_categories {
        return Err(Error::InvalidInput(format!(
            "task {}: category {} out of range 0..{}",
            task.id, task.category, schema.n_categories
        )));
    }
    if task.domain >= schema.n_domains {
        return Err(Error::InvalidInput(format!(
            "task {}: domain {} out of range 0..{}",
            task.id, task.domain, schema.n_domains
        )));
    }
    let [_, (dom_off, _), (award_off, _)] = schema.blocks();
    let mut v = vec![0.0; schema.dim()];
    v[task.category] = 1.0;
    v[dom_off + task.domain] = 1.0;
    v[award_off + schema.award_bin(task.award)] = 1.0;
    Ok(FeatureVector(v))
}

/// Mean task encoding over the worker's `history_window` most recent completions.
pub fn encode_worker<L: TaskLookup + ?Sized>(
    worker: &WorkerRecord,
    schema: &FeatureSchema,
    tasks: &L,
) -> Result<FeatureVector> {
    let mut acc = vec![0.0; schema.dim()];
    let mut n = 0usize;
    for id in worker.recent_tasks(schema.history_window) {
        let task = tasks
            .lookup(id)
            .ok_or_else(|| Error::InvalidInput(format!("worker {}: unknown task {id} in history", worker.id)))?;
        let enc = encode_task(task, schema)?;
        for (a, e) in acc.iter_mut().zip(enc.0) {
            *a += e;
        }
        n += 1;
    }
    if n > 0 {
        let inv = 1.0 / n as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    Ok(FeatureVector(acc))
}

/// Records that `worker` completed `task` at `time` and refreshes the task
/// quality with Dixit-Stiglitz exponent `p`. Returns the quality gain.
pub fn record_completion(
    worker: &mut WorkerRecord,
    task: &mut TaskRecord,
    time: Minutes,
    p: f64,
) -> Result<f64> {
    if time < worker.last_arrival {
        return Err(Error::InvalidState(format!(
            "worker {}: completion at {time} precedes last arrival {}",
            worker.id, worker.last_arrival
        )));
    }
    if let Some(&(last, _)) = worker.history.last() {
        if time < last {
            return Err(Error::InvalidState(format!("worker {}: history would go back in time", worker.id)));
        }
    }
    if !task.is_active(time) {
        return Err(Error::InvalidState(format!(
            "task {} is not active at {time} (created {}, deadline {})",
            task.id, task.created_at, task.deadline
        )));
    }
    let old = task.quality;
    task.completions.push((time, worker.id));
    task.completer_qualities.push(worker.quality);
    task.quality = task_quality(&task.completer_qualities, p)?;
    worker.history.push((time, task.id));
    Ok(task.quality - old)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema3() -> FeatureSchema {
        FeatureSchema::new(3, 2, vec![10.0, 100.0], 5).unwrap()
    }

    fn task(id: TaskId, cat: usize, dom: usize, award: f64) -> TaskRecord {
        TaskRecord::new(id, 0, 10_000, cat, dom, award).unwrap()
    }

    #[test]
    fn task_one_hot_layout() {
        let v = encode_task(&task(1, 1, 0, 50.0), &schema3()).unwrap();
        assert_eq!(v.0, vec![0., 1., 0., 1., 0., 0., 1., 0.]);
    }

    #[test]
    fn award_below_lowest_edge_is_first_bin() {
        let v = encode_task(&task(1, 0, 0, 3.0), &schema3()).unwrap();
        assert_eq!(&v.0[5..], &[1., 0., 0.]);
        // an award equal to an edge falls in the bin above it
        let v = encode_task(&task(1, 0, 0, 100.0), &schema3()).unwrap();
        assert_eq!(&v.0[5..], &[0., 0., 1.]);
    }

    #[test]
    fn identical_tasks_encode_identically() {
        let s = schema3();
        assert_eq!(encode_task(&task(1, 2, 1, 7.0), &s).unwrap(), encode_task(&task(2, 2, 1, 7.0), &s).unwrap());
    }

    #[test]
    fn out_of_range_category_is_rejected() {
        let err = encode_task(&task(1, 3, 0, 1.0), &schema3()).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        let err = encode_task(&task(1, 0, 2, 1.0), &schema3()).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn encoding_is_injective_on_attribute_triples() {
        let s = schema3();
        let mut seen = std::collections::HashSet::new();
        for c in 0..3 {
            for d in 0..2 {
                for a in [1.0, 50.0, 500.0] {
                    let v = encode_task(&task(0, c, d, a), &s).unwrap();
                    let key: Vec<u64> = v.0.iter().map(|x| x.to_bits()).collect();
                    assert!(seen.insert(key));
                }
            }
        }
    }

    #[test]
    fn worker_features() {
        let s = schema3();
        let mut tasks = HashMap::new();
        let mut w = WorkerRecord::new(9, 0.5, 0).unwrap();
        assert!(encode_worker(&w, &s, &tasks).unwrap().is_zero());

        let t = task(1, 2, 1, 500.0);
        tasks.insert(1, t.clone());
        let mut tm = tasks[&1].clone();
        record_completion(&mut w, &mut tm, 5, 2.0).unwrap();
        assert_eq!(encode_worker(&w, &s, &tasks).unwrap(), encode_task(&t, &s).unwrap());
    }

    #[test]
    fn worker_window_uses_most_recent_completions() {
        let s = schema3();
        let mut tasks = HashMap::new();
        let mut w = WorkerRecord::new(1, 0.7, 0).unwrap();
        let attrs = [(0, 0, 1.0), (1, 1, 20.0), (2, 0, 200.0), (0, 1, 5.0), (1, 0, 50.0)];
        for i in 0..10u64 {
            let (c, d, a) = attrs[(i as usize * 3) % attrs.len()];
            let mut t = task(i, c, d, a);
            tasks.insert(i, t.clone());
            record_completion(&mut w, &mut t, i as Minutes + 1, 2.0).unwrap();
        }
        // brute force mean over tasks 5..10
        let mut expect = vec![0.0; s.dim()];
        for i in 5..10u64 {
            let e = encode_task(&tasks[&i], &s).unwrap();
            for (x, y) in expect.iter_mut().zip(e.0) {
                *x += y / 5.0;
            }
        }
        let got = encode_worker(&w, &s, &tasks).unwrap();
        for (g, e) in got.0.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
        for (off, len) in s.blocks() {
            let sum: f64 = got.0[off..off + len].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn completion_shifts_feature_toward_task() {
        let s = schema3();
        let mut tasks = HashMap::new();
        let mut w = WorkerRecord::new(1, 0.7, 0).unwrap();
        let mut a = task(1, 0, 0, 1.0);
        let mut b = task(2, 2, 1, 500.0);
        tasks.insert(1, a.clone());
        tasks.insert(2, b.clone());
        record_completion(&mut w, &mut a, 1, 2.0).unwrap();
        let before = encode_worker(&w, &s, &tasks).unwrap();
        assert_eq!(before, encode_worker(&w, &s, &tasks).unwrap());
        record_completion(&mut w, &mut b, 2, 2.0).unwrap();
        let after = encode_worker(&w, &s, &tasks).unwrap();
        let eb = encode_task(&b, &s).unwrap();
        let dist = |f: &FeatureVector| f.0.iter().zip(&eb.0).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        assert!(dist(&after) < dist(&before));
        // mean of the two encodings
        let ea = encode_task(&a, &s).unwrap();
        for i in 0..s.dim() {
            assert!((after.0[i] - 0.5 * (ea.0[i] + eb.0[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_completion_by_same_worker() {
        let mut w = WorkerRecord::new(1, 0.6, 0).unwrap();
        let mut t = task(1, 0, 0, 1.0);
        let g1 = record_completion(&mut w, &mut t, 10, 2.0).unwrap();
        let g2 = record_completion(&mut w, &mut t, 20, 2.0).unwrap();
        assert_eq!(w.history.len(), 2);
        assert_eq!(t.completions.len(), 2);
        assert!((g1 - 0.6).abs() < 1e-12);
        assert!((t.quality - (0.72f64).sqrt()).abs() < 1e-12);
        assert!(g2 > 0.0 && g2 < g1);
    }

    #[test]
    fn completing_expired_task_fails() {
        let mut w = WorkerRecord::new(1, 0.6, 0).unwrap();
        let mut t = TaskRecord::new(1, 0, 100, 0, 0, 1.0).unwrap();
        assert!(matches!(record_completion(&mut w, &mut t, 101, 2.0), Err(Error::InvalidState(_))));
        assert!(w.history.is_empty());
        assert!(record_completion(&mut w, &mut t, 100, 2.0).is_ok());
    }

    #[test]
    fn prior_tasks_seed_the_window() {
        let s = schema3();
        let mut tasks = HashMap::new();
        tasks.insert(7, task(7, 1, 1, 20.0));
        let mut w = WorkerRecord::new(1, 0.5, 0).unwrap();
        w.prior.push(7);
        assert_eq!(encode_worker(&w, &s, &tasks).unwrap(), encode_task(&tasks[&7], &s).unwrap());
        w.prior.push(99);
        assert!(encode_worker(&w, &s, &tasks).is_err());
    }
}
