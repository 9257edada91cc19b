//! Combining the two Q heads, ranking, exploration, and the interface every
//! recommender (learned or baseline) implements.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{FeatureVector, Minutes, WorkerId};
use crate::error::{Error, Result};
use crate::learner::PoolTask;

/// Whether a worker is shown one task or a ranked list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionMode {
    Single,
    List,
}

impl std::str::FromStr for ActionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "single-task" => Ok(ActionMode::Single),
            "list" | "ranked-list" => Ok(ActionMode::List),
            other => Err(Error::Config(format!("unknown action mode `{other}`"))),
        }
    }
}

/// Linear interpolation from `start` to `end` over `steps` events, then flat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub start: f64,
    pub end: f64,
    pub steps: u64,
}

impl Schedule {
    pub fn new(start: f64, end: f64, steps: u64) -> Self {
        Self { start, end, steps }
    }

    pub fn constant(v: f64) -> Self {
        Self { start: v, end: v, steps: 0 }
    }

    pub fn value(&self, t: u64) -> f64 {
        if self.steps == 0 || t >= self.steps {
            return self.end;
        }
        self.start + (self.end - self.start) * (t as f64 / self.steps as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Weight of the worker head; `1 - w` goes to the requester head.
    pub balance_weight: f64,
    /// Exploit probability in single-task mode.
    pub epsilon: Schedule,
    /// Probability of perturbing Q before ranking in list mode.
    pub list_epsilon: f64,
    /// Noise std as a multiple of `std(Q)` in list mode.
    pub decay: Schedule,
    pub mode: ActionMode,
    /// Shown list length in list mode; the full ranking when `None`.
    pub list_len: Option<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            balance_weight: 0.25,
            epsilon: Schedule::new(0.9, 0.98, 10_000),
            list_epsilon: 0.9,
            decay: Schedule::new(1.0, 0.1, 10_000),
            mode: ActionMode::List,
            list_len: None,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.balance_weight) {
            return Err(Error::Config(format!("balance weight {} outside [0,1]", self.balance_weight)));
        }
        if !unit(self.epsilon.start) || !unit(self.epsilon.end) || !unit(self.list_epsilon) {
            return Err(Error::Config("epsilon outside [0,1]".into()));
        }
        if self.decay.start < 0.0 || self.decay.end < 0.0 {
            return Err(Error::Config("noise decay must be nonnegative".into()));
        }
        if self.list_len == Some(0) {
            return Err(Error::Config("list length must be positive".into()));
        }
        Ok(())
    }
}

/// `w * qw + (1 - w) * qr` elementwise.
pub fn aggregate(qw: &[f64], qr: &[f64], w: f64) -> Result<Vec<f64>> {
    if qw.len() != qr.len() {
        return Err(Error::InvalidInput(format!("Q heads disagree on pool size: {} vs {}", qw.len(), qr.len())));
    }
    Ok(qw.iter().zip(qr).map(|(a, b)| w * a + (1.0 - w) * b).collect())
}

/// Indices by descending Q; ties go to the lower index.
pub fn rank_tasks(q: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..q.len()).collect();
    idx.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));
    idx
}

fn std_dev(q: &[f64]) -> f64 {
    let n = q.len() as f64;
    let mean = q.iter().sum::<f64>() / n;
    (q.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Zero-mean Gaussian noise with std `std(q) * decay`, one draw per entry.
pub fn injected_noise<R: Rng + ?Sized>(q: &[f64], decay: f64, rng: &mut R) -> Vec<f64> {
    let sd = std_dev(q) * decay;
    if !(sd > 0.0) || !sd.is_finite() {
        return vec![0.0; q.len()];
    }
    let normal = Normal::new(0.0, sd).expect("positive finite std");
    q.iter().map(|_| normal.sample(rng)).collect()
}

/// Single-task mode: argmax with probability `epsilon`, otherwise a
/// uniform task. List mode: with probability `epsilon` rank `q + noise`,
/// otherwise rank `q`.
pub fn explore<R: Rng + ?Sized>(q: &[f64], epsilon: f64, decay: f64, mode: ActionMode, rng: &mut R) -> Vec<usize> {
    assert!(!q.is_empty(), "explore needs a nonempty pool");
    match mode {
        ActionMode::Single => {
            if rng.gen::<f64>() < epsilon {
                vec![rank_tasks(q)[0]]
            } else {
                vec![rng.gen_range(0..q.len())]
            }
        }
        ActionMode::List => {
            if decay > 0.0 && rng.gen::<f64>() < epsilon {
                let noisy: Vec<f64> = q.iter().zip(injected_noise(q, decay, rng)).map(|(a, b)| a + b).collect();
                rank_tasks(&noisy)
            } else {
                rank_tasks(q)
            }
        }
    }
}

/// A worker arriving at the platform, as seen by a policy.
#[derive(Debug, Clone)]
pub struct Arrival<'a> {
    pub time: Minutes,
    pub worker_id: WorkerId,
    pub worker_feature: &'a FeatureVector,
    pub worker_quality: f64,
    pub first_visit: bool,
    /// Active tasks, in a stable order; actions index into it.
    pub pool: &'a Arc<Vec<PoolTask>>,
}

/// What happened to a recommendation.
#[derive(Debug, Clone)]
pub struct Feedback<'a> {
    /// The shown tasks, best first.
    pub shown: &'a [usize],
    /// Position in `shown` of the completed task.
    pub completed: Option<usize>,
    /// Quality gain of the completed task.
    pub gain: f64,
    pub worker_feature_after: &'a FeatureVector,
    /// Pool after the completion was applied.
    pub next_pool: &'a Arc<Vec<PoolTask>>,
}

/// Common interface of the learned policy and the baselines.
pub trait TaskPolicy {
    fn name(&self) -> &str;

    /// Called for every arrival, including those facing an empty pool.
    fn observe(&mut self, _arrival: &Arrival<'_>) -> Result<()> {
        Ok(())
    }

    /// Ranked task indices (at least one); only the first is used in
    /// single-task mode.
    fn recommend(&mut self, arrival: &Arrival<'_>, mode: ActionMode) -> Result<Vec<usize>>;

    fn feedback(&mut self, arrival: &Arrival<'_>, feedback: &Feedback<'_>) -> Result<()>;

    /// Historical completion seen during initialization.
    fn warm_start(&mut self, arrival: &Arrival<'_>, feedback: &Feedback<'_>) -> Result<()> {
        self.feedback(arrival, feedback)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_zero_for_constant_q() {
        let mut rng = rand::thread_rng();
        assert_eq!(injected_noise(&[2.0, 2.0], 1.0, &mut rng), vec![0.0, 0.0]);
    }

    #[test]
    fn config_rejects_out_of_range_weight() {
        let cfg = PolicyConfig { balance_weight: 1.5, ..PolicyConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(PolicyConfig::default().validate().is_ok());
    }
}
