//! Machinery shared by the worker-benefit and requester-benefit learners:
//! transition records with explicitly predicted future states, a
//! proportional prioritized replay buffer, double-Q targets and the SGD step.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::domain::{FeatureVector, Minutes, TaskId, WorkerId};
use crate::error::{Error, Result};
use crate::qnetwork::{NetConfig, QNetworkParams};
use crate::tensor::{Gradients, Matrix, OptimizerKind, Optimizer, Tape};

/// A task as seen in a state snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolTask {
    pub id: TaskId,
    pub feature: FeatureVector,
    pub deadline: Minutes,
    pub quality: f64,
}

/// One predicted successor state: the snapshot pool restricted to tasks
/// still alive at `time`, seen by a worker with the given feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FutureState {
    pub probability: f64,
    pub time: Minutes,
    pub worker_feature: Arc<FeatureVector>,
    pub worker_quality: f64,
}

impl FutureState {
    /// Indices of snapshot tasks alive at the future time.
    pub fn alive(&self, pool: &[PoolTask]) -> Vec<usize> {
        (0..pool.len()).filter(|&j| pool[j].deadline >= self.time).collect()
    }
}

/// `(s, a, r)` plus everything needed to evaluate the successor states.
#[derive(Debug, Clone)]
pub struct Transition {
    pub worker_id: WorkerId,
    pub worker_feature: FeatureVector,
    pub worker_quality: f64,
    /// Pool at decision time.
    pub pool: Arc<Vec<PoolTask>>,
    /// Index into `pool` of the recommended task.
    pub action: usize,
    pub reward: f64,
    pub timestamp: Minutes,
    /// Pool after the feedback was applied (completed-task quality updated).
    pub next_pool: Arc<Vec<PoolTask>>,
    pub futures: Vec<FutureState>,
}

impl Transition {
    pub fn action_task(&self) -> TaskId {
        self.pool[self.action].id
    }

    fn debug_json(&self, priority: f64) -> serde_json::Value {
        serde_json::json!({
            "timestamp": self.timestamp,
            "worker": self.worker_id,
            "action_task": self.action_task(),
            "reward": self.reward,
            "priority": priority,
            "pool": self.pool.iter().map(|t| t.id).collect::<Vec<_>>(),
            "futures": self.futures.iter().map(|f| serde_json::json!({"time": f.time, "p": f.probability})).collect::<Vec<_>>(),
        })
    }
}

/// Stacks `[f_t | f_w]` (and `[q_t, q_w]` when `with_quality`) for the
/// selected pool rows.
pub fn state_rows(
    worker_feature: &FeatureVector,
    worker_quality: f64,
    pool: &[PoolTask],
    rows: &[usize],
    with_quality: bool,
) -> Matrix {
    let task_dim = pool.first().map_or(0, |t| t.feature.len());
    let wd = worker_feature.len();
    let width = task_dim + wd + if with_quality { 2 } else { 0 };
    let mut m = Matrix::zeros((rows.len(), width));
    for (r, &j) in rows.iter().enumerate() {
        let mut row = m.row_mut(r);
        let t = &pool[j];
        for (dst, &v) in row.iter_mut().zip(t.feature.as_slice().iter().chain(worker_feature.as_slice())) {
            *dst = v;
        }
        if with_quality {
            row[task_dim + wd] = t.quality;
            row[task_dim + wd + 1] = worker_quality;
        }
    }
    m
}

/// Binary tree of partial sums over leaf weights.
#[derive(Debug, Clone)]
struct SumTree {
    capacity: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two();
        Self { capacity: leaves, nodes: vec![0.0; 2 * leaves] }
    }

    fn set(&mut self, i: usize, w: f64) {
        let mut pos = i + self.capacity;
        self.nodes[pos] = w;
        while pos > 1 {
            pos /= 2;
            self.nodes[pos] = self.nodes[2 * pos] + self.nodes[2 * pos + 1];
        }
    }

    fn get(&self, i: usize) -> f64 {
        self.nodes[i + self.capacity]
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    /// Leaf whose cumulative weight interval contains `u`.
    fn find(&self, mut u: f64) -> usize {
        let mut pos = 1;
        while pos < self.capacity {
            let left = self.nodes[2 * pos];
            if u < left || self.nodes[2 * pos + 1] <= 0.0 {
                pos *= 2;
            } else {
                u -= left;
                pos = 2 * pos + 1;
            }
        }
        pos - self.capacity
    }
}

/// Ring buffer sampled proportionally to `priority^alpha`.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    items: Vec<T>,
    priorities: Vec<f64>,
    next: usize,
    capacity: usize,
    tree: SumTree,
    alpha: f64,
    eps: f64,
    max_priority: f64,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize, alpha: f64, eps: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        if !(eps > 0.0) {
            return Err(Error::Config("priority floor must be positive".into()));
        }
        Ok(Self {
            items: Vec::with_capacity(capacity),
            priorities: Vec::with_capacity(capacity),
            next: 0,
            capacity,
            tree: SumTree::new(capacity),
            alpha,
            eps,
            max_priority: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Inserts with the current maximum priority; returns the evicted
    /// (oldest) item once the buffer is full.
    pub fn push(&mut self, item: T) -> Option<T> {
        let slot = self.next;
        self.next = (self.next + 1) % self.capacity;
        let p = self.max_priority;
        self.tree.set(slot, p.powf(self.alpha));
        if slot < self.items.len() {
            self.priorities[slot] = p;
            Some(std::mem::replace(&mut self.items[slot], item))
        } else {
            self.items.push(item);
            self.priorities.push(p);
            None
        }
    }

    pub fn get(&self, slot: usize) -> Option<&T> {
        self.items.get(slot)
    }

    pub fn priority(&self, slot: usize) -> f64 {
        self.priorities[slot]
    }

    /// Probability that one draw returns `slot`.
    pub fn sampling_probability(&self, slot: usize) -> f64 {
        self.tree.get(slot) / self.tree.total()
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        let total = self.tree.total();
        (0..batch)
            .map(|_| {
                let slot = self.tree.find(rng.gen::<f64>() * total);
                slot.min(self.items.len() - 1)
            })
            .collect()
    }

    /// Sets the priority of `slot` to `|td_error| + eps`.
    pub fn update_priority(&mut self, slot: usize, td_error: f64) {
        let p = td_error.abs() + self.eps;
        self.priorities[slot] = p;
        self.max_priority = self.max_priority.max(p);
        self.tree.set(slot, p.powf(self.alpha));
    }

    /// Items from oldest to newest.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = (usize, &T)> {
        let n = self.items.len();
        let start = if n < self.capacity { 0 } else { self.next };
        (0..n).map(move |k| {
            let slot = (start + k) % n.max(1);
            (slot, &self.items[slot])
        })
    }
}

impl ReplayBuffer<Transition> {
    /// One JSON object per line, oldest first.
    pub fn dump<W: Write>(&self, mut w: W) -> Result<()> {
        for (slot, t) in self.iter_oldest_first() {
            writeln!(w, "{}", t.debug_json(self.priorities[slot]))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub target_copy_every: u64,
    pub priority_alpha: f64,
    pub priority_eps: f64,
    pub optimizer: OptimizerKind,
    /// Future states with probability below this are left out of the
    /// target (0 keeps every state).
    pub min_future_mass: f64,
}

impl LearnerConfig {
    pub fn worker_default() -> Self {
        Self {
            gamma: 0.3,
            learning_rate: 0.001,
            batch_size: 64,
            buffer_capacity: 1000,
            target_copy_every: 100,
            priority_alpha: 0.6,
            priority_eps: 1e-3,
            optimizer: OptimizerKind::Sgd,
            min_future_mass: 0.0,
        }
    }

    pub fn requester_default() -> Self {
        Self { gamma: 0.5, ..Self::worker_default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0,1]", self.gamma)));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.target_copy_every == 0 {
            return Err(Error::Config("batch size, buffer capacity and copy cadence must be positive".into()));
        }
        Ok(())
    }
}

/// Double-Q target `r + gamma * sum_s' P(s') Q~(s', argmax_a Q(s', a))`.
/// States whose pool is empty are terminal and contribute 0.
pub fn td_target(params: &QNetworkParams, gamma: f64, transition: &Transition, with_quality: bool, min_mass: f64) -> Result<f64> {
    let mut future = 0.0;
    if gamma != 0.0 {
        for fs in &transition.futures {
            if fs.probability <= min_mass && min_mass > 0.0 {
                continue;
            }
            if let Some(v) = double_q_value(params, fs, &transition.next_pool, with_quality)? {
                future += fs.probability * v;
            }
        }
    }
    Ok(transition.reward + gamma * future)
}

/// `Q~(s', argmax_a Q(s', a))`, or `None` for a terminal state.
pub fn double_q_value(params: &QNetworkParams, fs: &FutureState, pool: &[PoolTask], with_quality: bool) -> Result<Option<f64>> {
    let alive = fs.alive(pool);
    if alive.is_empty() {
        return Ok(None);
    }
    let rows = state_rows(&fs.worker_feature, fs.worker_quality, pool, &alive, with_quality);
    let online = params.net.eval_rows(&params.online, rows.clone())?;
    let best = argmax(&online);
    let target = params.net.eval_rows(&params.target, rows)?;
    Ok(Some(target[best]))
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A DQN learner with its replay memory and online/target parameters.
#[derive(Debug, Clone)]
pub struct DqnLearner {
    pub params: QNetworkParams,
    pub buffer: ReplayBuffer<Transition>,
    pub config: LearnerConfig,
    /// Appends `[q_t, q_w]` to state rows (requester head).
    pub with_quality: bool,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    steps: u64,
}

impl DqnLearner {
    pub fn new(net: NetConfig, config: LearnerConfig, with_quality: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = QNetworkParams::new(net, &mut rng)?;
        let buffer = ReplayBuffer::new(config.buffer_capacity, config.priority_alpha, config.priority_eps)?;
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate);
        Ok(Self { params, buffer, config, with_quality, optimizer, rng, steps: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Q values for every task of `pool` as seen by the given worker.
    pub fn q_values(&self, worker_feature: &FeatureVector, worker_quality: f64, pool: &[PoolTask]) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..pool.len()).collect();
        let rows = state_rows(worker_feature, worker_quality, pool, &all, self.with_quality);
        self.params.net.eval_rows(&self.params.online, rows)
    }

    pub fn q_of(&self, t: &Transition) -> Result<f64> {
        Ok(self.q_values(&t.worker_feature, t.worker_quality, &t.pool)?[t.action])
    }

    pub fn store(&mut self, t: Transition) -> Option<Transition> {
        self.buffer.push(t)
    }

    pub fn td_target(&self, t: &Transition) -> Result<f64> {
        td_target(&self.params, self.config.gamma, t, self.with_quality, self.config.min_future_mass)
    }

    /// One prioritized minibatch step on the mean squared TD error; the
    /// target is held constant. Returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        if self.buffer.is_empty() {
            return Err(Error::InvalidState("train step on an empty replay buffer".into()));
        }
        let batch = self.buffer.sample(self.config.batch_size, &mut self.rng);
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Gradients> = Vec::with_capacity(batch.len());
        let mut errors = Vec::with_capacity(batch.len());
        for &slot in &batch {
            let t = self.buffer.get(slot).expect("sampled slot is filled");
            let y = self.td_target(t)?;
            let all: Vec<usize> = (0..t.pool.len()).collect();
            let rows = state_rows(&t.worker_feature, t.worker_quality, &t.pool, &all, self.with_quality);
            let mut tape = Tape::new(&self.params.online);
            let out = self.params.net.forward(&mut tape, rows, &vec![true; all.len()])?;
            let q = tape.value(out)[[t.action, 0]];
            let err = y - q;
            loss += err * err * scale;
            let mut seed = Matrix::zeros((all.len(), 1));
            seed[[t.action, 0]] = -2.0 * err * scale;
            grads.push(tape.backward(out, &seed)?);
            errors.push((slot, err));
        }
        for g in &grads {
            self.params.online.accumulate(g)?;
        }
        self.optimizer.step(&mut self.params.online)?;
        for (slot, err) in errors {
            self.buffer.update_priority(slot, err);
        }
        self.steps += 1;
        if self.steps % self.config.target_copy_every == 0 {
            self.params.copy_to_target()?;
        }
        Ok(loss)
    }
}
