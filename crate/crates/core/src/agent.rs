//! The dual-head DQN recommender: a worker-benefit learner, a
//! requester-benefit learner, the arrival model that feeds their future
//! states, and the explorer that turns the blended Q values into actions.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{DqnLearner, LearnerConfig};
use crate::policy::{aggregate, explore, ActionMode, Arrival, Feedback, PolicyConfig, TaskPolicy};
use crate::qnetwork::NetConfig;
use crate::requester::{self, update_arrival_model, ArrivalEvent, ArrivalModel, FutureMode};
use crate::tensor::{save_params, OptimizerKind};
use crate::worker::{self, FeedbackContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdqnConfig {
    /// Length of task and worker feature vectors.
    pub feature_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub second_residual: bool,
    pub max_t: usize,
    pub worker: LearnerConfig,
    pub requester: LearnerConfig,
    pub policy: PolicyConfig,
    pub future_mode: FutureMode,
    /// Train after every `train_every` feedback events.
    pub train_every: u64,
    /// Minimum buffer size before training starts.
    pub train_start: usize,
    pub seed: u64,
}

impl DdqnConfig {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            width: 128,
            heads: 4,
            second_residual: true,
            max_t: 128,
            worker: LearnerConfig::worker_default(),
            requester: LearnerConfig::requester_default(),
            policy: PolicyConfig::default(),
            future_mode: FutureMode::Expectation,
            train_every: 1,
            train_start: 64,
            seed: 0,
        }
    }

    /// Settings for single-core runs on synthetic worlds: a narrower
    /// network, Adam, small batches, and unlikely future states pruned
    /// from the targets.
    pub fn compact(feature_dim: usize) -> Self {
        let mut c = Self::new(feature_dim);
        c.width = 32;
        for l in [&mut c.worker, &mut c.requester] {
            l.optimizer = OptimizerKind::Adam;
            l.learning_rate = 0.001;
            l.batch_size = 16;
            l.min_future_mass = 0.3;
        }
        c.train_start = 16;
        c
    }

    fn net(&self, with_quality: bool) -> Result<NetConfig> {
        let mut cfg = NetConfig::new(2 * self.feature_dim + if with_quality { 2 } else { 0 }, self.width, self.heads)?;
        cfg.second_residual = self.second_residual;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct DdqnAgent {
    pub config: DdqnConfig,
    /// Absent when the balance weight gives the worker head no say.
    pub worker: Option<DqnLearner>,
    /// Absent when the balance weight gives the requester head no say.
    pub requester: Option<DqnLearner>,
    pub arrivals: ArrivalModel,
    rng: ChaCha8Rng,
    feedback_events: u64,
    name: String,
}

impl DdqnAgent {
    pub fn new(config: DdqnConfig) -> Result<Self> {
        config.policy.validate()?;
        if config.train_every == 0 || config.max_t == 0 {
            return Err(Error::Config("train_every and max_t must be positive".into()));
        }
        let w = config.policy.balance_weight;
        let worker = if w > 0.0 { Some(DqnLearner::new(config.net(false)?, config.worker.clone(), false, config.seed)?) } else { None };
        let requester = if w < 1.0 {
            Some(DqnLearner::new(config.net(true)?, config.requester.clone(), true, config.seed.wrapping_add(1))?)
        } else {
            None
        };
        Ok(Self {
            arrivals: ArrivalModel::new(config.feature_dim),
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2)),
            worker,
            requester,
            feedback_events: 0,
            name: "ddqn".into(),
            config,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn feedback_events(&self) -> u64 {
        self.feedback_events
    }

    /// Blended Q values over the arrival's pool.
    pub fn q_values(&self, arrival: &Arrival<'_>) -> Result<Vec<f64>> {
        let pool = arrival.pool.as_slice();
        if pool.len() > self.config.max_t {
            return Err(Error::Capacity { pool: pool.len(), max_t: self.config.max_t });
        }
        let w = self.config.policy.balance_weight;
        let qw = match &self.worker {
            Some(l) => l.q_values(arrival.worker_feature, arrival.worker_quality, pool)?,
            None => vec![0.0; pool.len()],
        };
        let qr = match &self.requester {
            Some(l) => l.q_values(arrival.worker_feature, arrival.worker_quality, pool)?,
            None => vec![0.0; pool.len()],
        };
        aggregate(&qw, &qr, w)
    }

    fn learn(&mut self, arrival: &Arrival<'_>, fb: &Feedback<'_>) -> Result<()> {
        let ctx = FeedbackContext {
            worker_id: arrival.worker_id,
            worker_feature: arrival.worker_feature.clone(),
            worker_quality: arrival.worker_quality,
            worker_feature_after: Arc::new(fb.worker_feature_after.clone()),
            pool: Arc::clone(arrival.pool),
            next_pool: Arc::clone(fb.next_pool),
            now: arrival.time,
        };
        if fb.completed.is_some() {
            self.arrivals.refresh_worker(arrival.worker_id, fb.worker_feature_after)?;
        }
        if let Some(l) = self.worker.as_mut() {
            worker::store_feedback_w(l, &self.arrivals.phi_w, &ctx, fb.shown, fb.completed)?;
        }
        if let Some(l) = self.requester.as_mut() {
            requester::store_feedback_r(l, &self.arrivals, self.config.future_mode, &ctx, fb.shown, fb.completed, fb.gain)?;
        }
        self.feedback_events += 1;
        if self.feedback_events % self.config.train_every == 0 {
            for l in [self.worker.as_mut(), self.requester.as_mut()].into_iter().flatten() {
                if l.buffer.len() >= self.config.train_start {
                    l.train_step()?;
                }
            }
        }
        Ok(())
    }

    /// Writes `worker.ckpt`, `requester.ckpt` (online parameters) and
    /// `arrivals.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        if let Some(l) = &self.worker {
            save_params(&l.params.online, dir.join("worker.ckpt"))?;
        }
        if let Some(l) = &self.requester {
            save_params(&l.params.online, dir.join("requester.ckpt"))?;
        }
        std::fs::write(dir.join("arrivals.json"), self.arrivals.to_json()?)?;
        Ok(())
    }
}

impl TaskPolicy for DdqnAgent {
    fn name(&self) -> &str {
        &self.name
    }

    fn observe(&mut self, arrival: &Arrival<'_>) -> Result<()> {
        update_arrival_model(
            &mut self.arrivals,
            &ArrivalEvent {
                time: arrival.time,
                worker: arrival.worker_id,
                feature: arrival.worker_feature.clone(),
                quality: arrival.worker_quality,
            },
        )
    }

    fn recommend(&mut self, arrival: &Arrival<'_>, mode: ActionMode) -> Result<Vec<usize>> {
        let q = self.q_values(arrival)?;
        let t = self.feedback_events;
        let p = &self.config.policy;
        let eps = match mode {
            ActionMode::Single => p.epsilon.value(t),
            ActionMode::List => p.list_epsilon,
        };
        Ok(explore(&q, eps, p.decay.value(t), mode, &mut self.rng))
    }

    fn feedback(&mut self, arrival: &Arrival<'_>, fb: &Feedback<'_>) -> Result<()> {
        self.learn(arrival, fb)
    }
}
