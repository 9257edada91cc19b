//! Worker-benefit MDP: completion reward, the same-worker return-gap
//! histogram, expiry-grouped future states and the learner wrappers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{FeatureVector, Minutes, WorkerId};
use crate::error::{Error, Result};
use crate::learner::{self, DqnLearner, FutureState, PoolTask, Transition};
use crate::qnetwork::QNetworkParams;

/// Longest same-worker return gap tracked: one week in minutes.
pub const MAX_RETURN_GAP: Minutes = 10_080;

/// Counts of integer-minute gaps over a fixed support `[lo, hi]`, with
/// Laplace smoothing and a Fenwick tree for range counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapHistogram {
    lo: Minutes,
    hi: Minutes,
    counts: Vec<u64>,
    fenwick: Vec<u64>,
    total: u64,
    smoothing: f64,
    clamped: u64,
}

impl GapHistogram {
    pub fn new(lo: Minutes, hi: Minutes, smoothing: f64) -> Result<Self> {
        if hi < lo {
            return Err(Error::Config(format!("empty gap support [{lo}, {hi}]")));
        }
        if !(smoothing >= 0.0) || !smoothing.is_finite() {
            return Err(Error::Config("smoothing must be finite and nonnegative".into()));
        }
        let n = (hi - lo + 1) as usize;
        Ok(Self { lo, hi, counts: vec![0; n], fenwick: vec![0; n + 1], total: 0, smoothing, clamped: 0 })
    }

    /// Same-worker return gaps over `[1, 10080]`, smoothing `1/10080`.
    pub fn same_worker() -> Self {
        Self::new(1, MAX_RETURN_GAP, 1.0 / MAX_RETURN_GAP as f64).expect("static support")
    }

    /// Any-worker inter-arrival gaps over `[0, 60]`, smoothing `1/61`.
    pub fn any_arrival() -> Self {
        Self::new(0, 60, 1.0 / 61.0).expect("static support")
    }

    pub fn support(&self) -> (Minutes, Minutes) {
        (self.lo, self.hi)
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    /// Observations that fell outside the support and were clamped.
    pub fn clamped(&self) -> u64 {
        self.clamped
    }

    pub fn count(&self, gap: Minutes) -> u64 {
        self.counts[self.bin(gap)]
    }

    fn bin(&self, gap: Minutes) -> usize {
        (gap.clamp(self.lo, self.hi) - self.lo) as usize
    }

    pub fn update(&mut self, gap: Minutes) {
        if gap < self.lo || gap > self.hi {
            self.clamped += 1;
            log::debug!("gap {gap} outside [{}, {}], clamped", self.lo, self.hi);
        }
        let b = self.bin(gap);
        self.counts[b] += 1;
        self.total += 1;
        let mut i = b + 1;
        while i < self.fenwick.len() {
            self.fenwick[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    fn prefix(&self, bins: usize) -> u64 {
        let mut i = bins;
        let mut s = 0;
        while i > 0 {
            s += self.fenwick[i];
            i -= i & i.wrapping_neg();
        }
        s
    }

    /// Raw count over `[a, b]` intersected with the support.
    pub fn count_range(&self, a: Minutes, b: Minutes) -> u64 {
        let (a, b) = (a.max(self.lo), b.min(self.hi));
        if a > b {
            return 0;
        }
        self.prefix((b - self.lo + 1) as usize) - self.prefix((a - self.lo) as usize)
    }

    fn denominator(&self) -> f64 {
        self.total as f64 + self.smoothing * self.n_bins() as f64
    }

    /// Smoothed normalized mass of one gap; out-of-support gaps are
    /// clamped to the nearest edge.
    pub fn prob(&self, gap: Minutes) -> f64 {
        let d = self.denominator();
        if d == 0.0 {
            return 1.0 / self.n_bins() as f64;
        }
        (self.count(gap) as f64 + self.smoothing) / d
    }

    /// Smoothed mass of `[a, b]` intersected with the support.
    pub fn mass(&self, a: Minutes, b: Minutes) -> f64 {
        let (a2, b2) = (a.max(self.lo), b.min(self.hi));
        if a2 > b2 {
            return 0.0;
        }
        let len = (b2 - a2 + 1) as f64;
        let d = self.denominator();
        if d == 0.0 {
            return len / self.n_bins() as f64;
        }
        (self.count_range(a2, b2) as f64 + self.smoothing * len) / d
    }
}

impl Default for GapHistogram {
    fn default() -> Self {
        Self::same_worker()
    }
}

/// `1` when a recommended task was completed, else `0`.
pub fn reward_w(completed: bool) -> f64 {
    if completed {
        1.0
    } else {
        0.0
    }
}

/// A run of gaps `[start, end]` during which the set of surviving pool
/// tasks is constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpiryCell {
    pub start: Minutes,
    pub end: Minutes,
}

impl ExpiryCell {
    pub fn len(&self) -> Minutes {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }
}

/// Splits `[lo, hi]` at the expiry breakpoints of `pool`: a task with
/// `deadline - now = e` survives gaps `g <= e`, so each `e` in `[lo, hi)`
/// closes a cell.
pub fn expiry_cells(pool: &[PoolTask], now: Minutes, lo: Minutes, hi: Minutes) -> Vec<ExpiryCell> {
    let mut cuts: Vec<Minutes> = pool.iter().map(|t| t.deadline - now).filter(|&e| e >= lo && e < hi).collect();
    cuts.sort_unstable();
    cuts.dedup();
    let mut cells = Vec::with_capacity(cuts.len() + 1);
    let mut start = lo;
    for e in cuts {
        cells.push(ExpiryCell { start, end: e });
        start = e + 1;
    }
    cells.push(ExpiryCell { start, end: hi });
    cells
}

/// One future state per expiry cell of `[1, 10080]`, weighted by the
/// histogram mass of the cell. `worker_feature` is the post-feedback
/// feature (unchanged when the reward was 0).
pub fn predict_future_states_w(
    pool: &[PoolTask],
    now: Minutes,
    hist: &GapHistogram,
    worker_feature: Arc<FeatureVector>,
    worker_quality: f64,
) -> Vec<FutureState> {
    let (lo, hi) = hist.support();
    expiry_cells(pool, now, lo, hi)
        .into_iter()
        .map(|c| FutureState {
            probability: hist.mass(c.start, c.end),
            time: now + c.start,
            worker_feature: Arc::clone(&worker_feature),
            worker_quality,
        })
        .collect()
}

/// Double-Q target of a worker-head transition.
pub fn td_target_w(params: &QNetworkParams, gamma: f64, transition: &Transition) -> Result<f64> {
    learner::td_target(params, gamma, transition, false, 0.0)
}

/// The plain form `r + gamma * sum P(s') max_a Q(s', a; theta)`.
pub fn td_target_plain_w(params: &QNetworkParams, gamma: f64, transition: &Transition) -> Result<f64> {
    let mut future = 0.0;
    for fs in &transition.futures {
        let alive = fs.alive(&transition.next_pool);
        if alive.is_empty() {
            continue;
        }
        let rows = learner::state_rows(&fs.worker_feature, fs.worker_quality, &transition.next_pool, &alive, false);
        let q = params.net.eval_rows(&params.online, rows)?;
        future += fs.probability * q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(transition.reward + gamma * future)
}

pub fn train_step_w(learner: &mut DqnLearner) -> Result<f64> {
    learner.train_step()
}

/// Everything about one arrival needed to build its transitions.
#[derive(Debug, Clone)]
pub struct FeedbackContext {
    pub worker_id: WorkerId,
    pub worker_feature: FeatureVector,
    pub worker_quality: f64,
    /// Worker feature after a completion (equal to `worker_feature` if none).
    pub worker_feature_after: Arc<FeatureVector>,
    pub pool: Arc<Vec<PoolTask>>,
    pub next_pool: Arc<Vec<PoolTask>>,
    pub now: Minutes,
}

/// Positions of `ranked` the worker examined under the cascade model,
/// paired with whether that position was the completion.
pub fn examined(ranked: &[usize], completed: Option<usize>) -> Vec<(usize, bool)> {
    match completed {
        Some(rank) => (0..=rank.min(ranked.len().saturating_sub(1))).map(|i| (ranked[i], i == rank)).collect(),
        None => ranked.iter().map(|&a| (a, false)).collect(),
    }
}

/// Stores one transition per examined task: failures above the completed
/// rank with `r = 0`, the completed task with `r = 1`. Failures keep the
/// pre-feedback worker feature in their future states.
pub fn store_feedback_w(
    learner: &mut DqnLearner,
    hist: &GapHistogram,
    ctx: &FeedbackContext,
    ranked: &[usize],
    completed: Option<usize>,
) -> Result<usize> {
    if ranked.is_empty() {
        return Err(Error::InvalidInput("feedback for an empty action list".into()));
    }
    if let Some(rank) = completed {
        if rank >= ranked.len() {
            return Err(Error::InvalidInput(format!("completed rank {rank} beyond list of {}", ranked.len())));
        }
    }
    let unchanged = Arc::new(ctx.worker_feature.clone());
    let fail_futures = predict_future_states_w(&ctx.next_pool, ctx.now, hist, unchanged, ctx.worker_quality);
    let mut stored = 0;
    for (action, success) in examined(ranked, completed) {
        let futures = if success {
            predict_future_states_w(&ctx.next_pool, ctx.now, hist, Arc::clone(&ctx.worker_feature_after), ctx.worker_quality)
        } else {
            fail_futures.clone()
        };
        learner.store(Transition {
            worker_id: ctx.worker_id,
            worker_feature: ctx.worker_feature.clone(),
            worker_quality: ctx.worker_quality,
            pool: Arc::clone(&ctx.pool),
            action,
            reward: reward_w(success),
            timestamp: ctx.now,
            next_pool: Arc::clone(&ctx.next_pool),
            futures,
        });
        stored += 1;
    }
    Ok(stored)
}
