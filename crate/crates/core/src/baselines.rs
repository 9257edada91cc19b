//! Comparison recommenders: uniform random, cosine-similarity greedy, a
//! daily-retrained two-layer network, and a shared-parameter LinUCB.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{FeatureVector, Minutes};
use crate::error::{Error, Result};
use crate::learner::{state_rows, PoolTask};
use crate::policy::{rank_tasks, ActionMode, Arrival, Feedback, TaskPolicy};
use crate::requester::marginal_gain;
use crate::tensor::{Matrix, Optimizer, OptimizerKind, ParamSet, Tape};
use crate::worker::examined;

/// A uniform task, or a uniform permutation in list mode; `None` for an
/// empty pool.
pub fn random_policy<R: Rng + ?Sized>(pool_len: usize, mode: ActionMode, rng: &mut R) -> Option<Vec<usize>> {
    if pool_len == 0 {
        return None;
    }
    Some(match mode {
        ActionMode::Single => vec![rng.gen_range(0..pool_len)],
        ActionMode::List => {
            let mut p: Vec<usize> = (0..pool_len).collect();
            p.shuffle(rng);
            p
        }
    })
}

pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl TaskPolicy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn recommend(&mut self, arrival: &Arrival<'_>, mode: ActionMode) -> Result<Vec<usize>> {
        random_policy(arrival.pool.len(), mode, &mut self.rng).ok_or_else(|| Error::InvalidInput("empty pool".into()))
    }

    fn feedback(&mut self, _: &Arrival<'_>, _: &Feedback<'_>) -> Result<()> {
        Ok(())
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &FeatureVector, b: &FeatureVector) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// `cos(f_w, f_t)` per task, times the task's quality gain when given.
pub fn greedy_cosine(worker: &FeatureVector, tasks: &[&FeatureVector], gains: Option<&[f64]>) -> Vec<f64> {
    tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let c = cosine(worker, t);
            gains.map_or(c, |g| c * g[i])
        })
        .collect()
}

fn gains_for(pool: &[PoolTask], worker_quality: f64, p: f64) -> Vec<f64> {
    pool.iter().map(|t| marginal_gain(t.quality, worker_quality, p)).collect()
}

pub struct GreedyCosinePolicy {
    /// Weight scores by the quality gain of each task.
    pub requester: bool,
    pub p: f64,
}

impl TaskPolicy for GreedyCosinePolicy {
    fn name(&self) -> &str {
        if self.requester {
            "greedy-cos-r"
        } else {
            "greedy-cos"
        }
    }

    fn recommend(&mut self, arrival: &Arrival<'_>, _: ActionMode) -> Result<Vec<usize>> {
        let feats: Vec<&FeatureVector> = arrival.pool.iter().map(|t| &t.feature).collect();
        let gains = self.requester.then(|| gains_for(arrival.pool, arrival.worker_quality, self.p));
        Ok(rank_tasks(&greedy_cosine(arrival.worker_feature, &feats, gains.as_deref())))
    }

    fn feedback(&mut self, _: &Arrival<'_>, _: &Feedback<'_>) -> Result<()> {
        Ok(())
    }
}

/// Shared ridge-regression model with an upper-confidence bonus.
#[derive(Debug, Clone, PartialEq)]
pub struct LinUcbState {
    pub a: Array2<f64>,
    a_inv: Array2<f64>,
    pub b: Array1<f64>,
    pub alpha: f64,
}

impl LinUcbState {
    pub fn new(dim: usize, alpha: f64) -> Self {
        Self { a: Array2::eye(dim), a_inv: Array2::eye(dim), b: Array1::zeros(dim), alpha }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape { op: "linucb", detail: format!("context of length {}, model has {}", x.len(), self.dim()) });
        }
        Ok(())
    }

    pub fn theta(&self) -> Array1<f64> {
        self.a_inv.dot(&self.b)
    }

    /// `x^T theta`.
    pub fn estimate(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(Array1::from(x.to_vec()).dot(&self.theta()))
    }

    /// `x^T theta + alpha * sqrt(x^T A^-1 x)`.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let xv = Array1::from(x.to_vec());
        let width = xv.dot(&self.a_inv.dot(&xv));
        if !(width >= -1e-12) {
            return Err(Error::Numerical { param: "linucb.A".into() });
        }
        Ok(xv.dot(&self.theta()) + self.alpha * width.max(0.0).sqrt())
    }

    /// `A += x x^T`, `b += r x`; the inverse follows by Sherman-Morrison.
    pub fn update(&mut self, x: &[f64], reward: f64) -> Result<()> {
        self.check(x)?;
        let xv = Array1::from(x.to_vec());
        let ax = self.a_inv.dot(&xv);
        let denom = 1.0 + xv.dot(&ax);
        if !(denom > 0.0) || !denom.is_finite() {
            return Err(Error::Numerical { param: "linucb.A".into() });
        }
        let n = self.dim();
        for i in 0..n {
            for j in 0..n {
                self.a[[i, j]] += xv[i] * xv[j];
                self.a_inv[[i, j]] -= ax[i] * ax[j] / denom;
            }
        }
        self.b.scaled_add(reward, &xv);
        Ok(())
    }

    /// Whether a Cholesky factorization of `A` succeeds.
    pub fn is_positive_definite(&self) -> bool {
        let n = self.dim();
        let mut l = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.a[[i, j]];
                if (s - self.a[[j, i]]).abs() > 1e-9 * s.abs().max(1.0) {
                    return false;
                }
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                if i == j {
                    if !(s > 0.0) {
                        return false;
                    }
                    l[[i, i]] = s.sqrt();
                } else {
                    l[[i, j]] = s / l[[j, j]];
                }
            }
        }
        true
    }
}

fn context_rows(arrival: &Arrival<'_>, with_quality: bool) -> Matrix {
    let all: Vec<usize> = (0..arrival.pool.len()).collect();
    state_rows(arrival.worker_feature, arrival.worker_quality, arrival.pool, &all, with_quality)
}

pub struct LinUcbPolicy {
    pub state: LinUcbState,
    /// Reward is the quality gain and contexts carry qualities.
    pub requester: bool,
}

impl LinUcbPolicy {
    pub fn new(feature_dim: usize, alpha: f64, requester: bool) -> Self {
        let dim = 2 * feature_dim + if requester { 2 } else { 0 };
        Self { state: LinUcbState::new(dim, alpha), requester }
    }
}

impl TaskPolicy for LinUcbPolicy {
    fn name(&self) -> &str {
        if self.requester {
            "linucb-r"
        } else {
            "linucb"
        }
    }

    fn recommend(&mut self, arrival: &Arrival<'_>, _: ActionMode) -> Result<Vec<usize>> {
        let rows = context_rows(arrival, self.requester);
        let scores = rows.rows().into_iter().map(|r| self.state.score(r.as_slice().expect("row-major"))).collect::<Result<Vec<_>>>()?;
        Ok(rank_tasks(&scores))
    }

    fn feedback(&mut self, arrival: &Arrival<'_>, fb: &Feedback<'_>) -> Result<()> {
        let rows = context_rows(arrival, self.requester);
        for (action, success) in examined(fb.shown, fb.completed) {
            let r = match (success, self.requester) {
                (false, _) => 0.0,
                (true, false) => 1.0,
                (true, true) => fb.gain,
            };
            self.state.update(rows.row(action).as_slice().expect("row-major"), r)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyNnConfig {
    pub hidden: [usize; 2],
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
}

impl Default for GreedyNnConfig {
    fn default() -> Self {
        Self { hidden: [64, 64], epochs: 5, batch_size: 32, learning_rate: 0.05, optimizer: OptimizerKind::Sgd }
    }
}

/// Two relu hidden layers and a linear output, regressed with squared
/// error on the samples buffered since the last retrain.
#[derive(Debug, Clone)]
pub struct GreedyNnState {
    pub params: ParamSet,
    pub config: GreedyNnConfig,
    buffer: Vec<(Vec<f64>, f64)>,
    last_retrain_day: Option<i64>,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
}

impl GreedyNnState {
    pub fn new(input_dim: usize, config: GreedyNnConfig, seed: u64) -> Result<Self> {
        if input_dim == 0 || config.hidden.contains(&0) || config.batch_size == 0 {
            return Err(Error::Config("greedy-nn dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let [h1, h2] = config.hidden;
        params.add_glorot("l1.w", input_dim, h1, &mut rng)?;
        params.add_zeros("l1.b", 1, h1)?;
        params.add_glorot("l2.w", h1, h2, &mut rng)?;
        params.add_zeros("l2.b", 1, h2)?;
        params.add_glorot("out.w", h2, 1, &mut rng)?;
        params.add_zeros("out.b", 1, 1)?;
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate);
        Ok(Self { params, config, buffer: Vec::new(), last_retrain_day: None, optimizer, rng })
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    fn forward(tape: &mut Tape<'_>, x: Matrix) -> Result<crate::tensor::Var> {
        let x = tape.input(x);
        let (w, b) = (tape.param("l1.w")?, tape.param("l1.b")?);
        let h = tape.rff_forward(x, w, b)?;
        let (w, b) = (tape.param("l2.w")?, tape.param("l2.b")?);
        let h = tape.rff_forward(h, w, b)?;
        let (w, b) = (tape.param("out.w")?, tape.param("out.b")?);
        let o = tape.matmul(h, w)?;
        tape.add_bias(o, b)
    }

    pub fn predict(&self, rows: &Matrix) -> Result<Vec<f64>> {
        let mut tape = Tape::inference(&self.params);
        let out = Self::forward(&mut tape, rows.clone())?;
        Ok(tape.value(out).column(0).to_vec())
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64) {
        self.buffer.push((x, y));
    }

    /// Runs the configured epochs over the buffered samples and clears
    /// them. At most once per day; returns whether training ran.
    pub fn daily_retrain(&mut self, day: i64) -> Result<bool> {
        if self.last_retrain_day == Some(day) {
            return Ok(false);
        }
        self.last_retrain_day = Some(day);
        if self.buffer.is_empty() {
            return Ok(false);
        }
        let dim = self.buffer[0].0.len();
        let mut order: Vec<usize> = (0..self.buffer.len()).collect();
        for _ in 0..self.config.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.config.batch_size) {
                let mut x = Matrix::zeros((chunk.len(), dim));
                let mut seed = Matrix::zeros((chunk.len(), 1));
                let grads = {
                    for (r, &i) in chunk.iter().enumerate() {
                        x.row_mut(r).assign(&ndarray::ArrayView1::from(&self.buffer[i].0));
                    }
                    let mut tape = Tape::new(&self.params);
                    let out = Self::forward(&mut tape, x)?;
                    let pred = tape.value(out);
                    for (r, &i) in chunk.iter().enumerate() {
                        seed[[r, 0]] = 2.0 * (pred[[r, 0]] - self.buffer[i].1) / chunk.len() as f64;
                    }
                    tape.backward(out, &seed)?
                };
                self.params.accumulate(&grads)?;
                self.optimizer.step(&mut self.params)?;
            }
        }
        self.buffer.clear();
        Ok(true)
    }
}

pub fn day_of(time: Minutes) -> i64 {
    time.div_euclid(1440)
}

pub struct GreedyNnPolicy {
    pub state: GreedyNnState,
    /// Predicts quality gain from quality-augmented rows.
    pub requester: bool,
}

impl GreedyNnPolicy {
    pub fn new(feature_dim: usize, config: GreedyNnConfig, requester: bool, seed: u64) -> Result<Self> {
        let dim = 2 * feature_dim + if requester { 2 } else { 0 };
        Ok(Self { state: GreedyNnState::new(dim, config, seed)?, requester })
    }
}

impl TaskPolicy for GreedyNnPolicy {
    fn name(&self) -> &str {
        if self.requester {
            "greedy-nn-r"
        } else {
            "greedy-nn"
        }
    }

    fn recommend(&mut self, arrival: &Arrival<'_>, _: ActionMode) -> Result<Vec<usize>> {
        self.state.daily_retrain(day_of(arrival.time))?;
        let scores = self.state.predict(&context_rows(arrival, self.requester))?;
        Ok(rank_tasks(&scores))
    }

    fn feedback(&mut self, arrival: &Arrival<'_>, fb: &Feedback<'_>) -> Result<()> {
        let rows = context_rows(arrival, self.requester);
        for (action, success) in examined(fb.shown, fb.completed) {
            let y = match (success, self.requester) {
                (false, _) => 0.0,
                (true, false) => 1.0,
                (true, true) => fb.gain,
            };
            self.state.push(rows.row(action).to_vec(), y);
        }
        Ok(())
    }
}
