//! Requester-benefit MDP: Dixit-Stiglitz task quality, quality-gain reward,
//! the any-worker arrival model and its future-state predictor.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{FeatureVector, Minutes, WorkerId};
use crate::error::{Error, Result};
use crate::learner::{self, DqnLearner, FutureState, PoolTask, Transition};
use crate::qnetwork::QNetworkParams;
use crate::worker::{examined, expiry_cells, FeedbackContext, GapHistogram};

/// `(sum q^p)^(1/p)`; `p = f64::INFINITY` gives the maximum.
pub fn task_quality(qualities: &[f64], p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::Config(format!("quality exponent p = {p} must be at least 1")));
    }
    if let Some(q) = qualities.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(Error::InvalidInput(format!("worker quality {q} outside [0,1]")));
    }
    if qualities.is_empty() {
        return Ok(0.0);
    }
    if p.is_infinite() {
        return Ok(qualities.iter().cloned().fold(0.0, f64::max));
    }
    if p == 1.0 {
        return Ok(qualities.iter().sum());
    }
    // Scale by the maximum so large p does not underflow.
    let m = qualities.iter().cloned().fold(0.0, f64::max);
    if m == 0.0 {
        return Ok(0.0);
    }
    let s: f64 = qualities.iter().map(|q| (q / m).powf(p)).sum();
    Ok(m * s.powf(1.0 / p))
}

/// Gain from adding a completer of quality `q_w` to a task whose current
/// quality is `q_t`: `(q_t^p + q_w^p)^(1/p) - q_t`.
pub fn marginal_gain(q_t: f64, q_w: f64, p: f64) -> f64 {
    if p.is_infinite() {
        return (q_w - q_t).max(0.0);
    }
    let m = q_t.max(q_w);
    if m == 0.0 {
        return 0.0;
    }
    let s = (q_t / m).powf(p) + (q_w / m).powf(p);
    (m * s.powf(1.0 / p) - q_t).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityConfig {
    pub p: f64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self { p: 2.0 }
    }
}

/// Quality gain `q_after - q_before`; 0 on a skip.
pub fn reward_r(quality_before: f64, quality_after: Option<f64>) -> f64 {
    match quality_after {
        Some(after) => (after - quality_before).max(0.0),
        None => 0.0,
    }
}

/// What the arrival model remembers about a worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownWorker {
    pub last_arrival: Minutes,
    pub feature: FeatureVector,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalEvent {
    pub time: Minutes,
    pub worker: WorkerId,
    pub feature: FeatureVector,
    pub quality: f64,
}

/// Who arrives next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NextWorker {
    Old(WorkerId),
    New,
}

/// Empirical model of who arrives next and when.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalModel {
    pub phi_w: GapHistogram,
    pub phi_r: GapHistogram,
    pub n_arrivals: u64,
    pub n_new: u64,
    last_event: Option<Minutes>,
    workers: BTreeMap<WorkerId, KnownWorker>,
    feature_sum: Vec<f64>,
    quality_sum: f64,
}

impl ArrivalModel {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            phi_w: GapHistogram::same_worker(),
            phi_r: GapHistogram::any_arrival(),
            n_arrivals: 0,
            n_new: 0,
            last_event: None,
            workers: BTreeMap::new(),
            feature_sum: vec![0.0; feature_dim],
            quality_sum: 0.0,
        }
    }

    pub fn p_new(&self) -> f64 {
        if self.n_arrivals == 0 {
            1.0
        } else {
            self.n_new as f64 / self.n_arrivals as f64
        }
    }

    pub fn workers(&self) -> &BTreeMap<WorkerId, KnownWorker> {
        &self.workers
    }

    pub fn last_event(&self) -> Option<Minutes> {
        self.last_event
    }

    /// f̄_w: mean current feature over known workers.
    pub fn mean_worker_feature(&self) -> FeatureVector {
        let n = self.workers.len().max(1) as f64;
        FeatureVector(self.feature_sum.iter().map(|s| s / n).collect())
    }

    pub fn mean_worker_quality(&self) -> f64 {
        if self.workers.is_empty() {
            0.0
        } else {
            self.quality_sum / self.workers.len() as f64
        }
    }

    /// Replaces a known worker's feature (after a completion).
    pub fn refresh_worker(&mut self, id: WorkerId, feature: &FeatureVector) -> Result<()> {
        let w = self
            .workers
            .get_mut(&id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown worker {id}")))?;
        if feature.len() != self.feature_sum.len() {
            return Err(Error::InvalidInput("worker feature dimension mismatch".into()));
        }
        for ((s, new), old) in self.feature_sum.iter_mut().zip(feature.as_slice()).zip(w.feature.as_slice()) {
            *s += new - old;
        }
        w.feature = feature.clone();
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse { line: 0, detail: e.to_string() })
    }
}

/// Folds one arrival into the model: same-worker gap, any-arrival gap,
/// new-worker count, feature mean and last-arrival map.
pub fn update_arrival_model(model: &mut ArrivalModel, event: &ArrivalEvent) -> Result<()> {
    if let Some(last) = model.last_event {
        if event.time < last {
            return Err(Error::InvalidInput(format!("arrival at {} precedes previous event at {last}", event.time)));
        }
    }
    if event.feature.len() != model.feature_sum.len() {
        return Err(Error::InvalidInput("worker feature dimension mismatch".into()));
    }
    if let Some(last) = model.last_event {
        model.phi_r.update(event.time - last);
    }
    model.last_event = Some(event.time);
    model.n_arrivals += 1;
    match model.workers.get_mut(&event.worker) {
        Some(w) => {
            model.phi_w.update(event.time - w.last_arrival);
            w.last_arrival = event.time;
            model.quality_sum += event.quality - w.quality;
            w.quality = event.quality;
        }
        None => {
            model.n_new += 1;
            model.quality_sum += event.quality;
            model.workers.insert(
                event.worker,
                KnownWorker { last_arrival: event.time, feature: FeatureVector::zeros(event.feature.len()), quality: event.quality },
            );
        }
    }
    model.refresh_worker(event.worker, &event.feature)
}

/// `Pr(next = w)` at `candidate_time`: old workers share `1 - p_new` in
/// proportion to `phi_w(candidate_time - last_arrival)`, NEW gets `p_new`.
pub fn next_worker_distribution(model: &ArrivalModel, candidate_time: Minutes) -> Result<Vec<(NextWorker, f64)>> {
    if model.workers.is_empty() {
        return Ok(vec![(NextWorker::New, 1.0)]);
    }
    let p_new = model.p_new();
    let mut weights = Vec::with_capacity(model.workers.len());
    let mut total = 0.0;
    for (&id, w) in &model.workers {
        if w.last_arrival > candidate_time {
            return Err(Error::InvalidInput(format!("worker {id} last arrived after candidate time {candidate_time}")));
        }
        let phi = model.phi_w.prob(candidate_time - w.last_arrival);
        total += phi;
        weights.push((NextWorker::Old(id), phi));
    }
    let n = weights.len() as f64;
    for (_, p) in &mut weights {
        *p = if total > 0.0 { (1.0 - p_new) * *p / total } else { (1.0 - p_new) / n };
    }
    weights.push((NextWorker::New, p_new));
    Ok(weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FutureMode {
    /// One state per expiry cell carrying the expected next-worker feature.
    Expectation,
    /// One state per (expiry cell, likely worker); workers below
    /// `threshold` are dropped, at most `max_workers` kept per gap, and the
    /// rest renormalized. The single most likely worker is always kept.
    ExactTruncated { threshold: f64, max_workers: usize },
}

impl Default for FutureMode {
    fn default() -> Self {
        FutureMode::Expectation
    }
}

impl FutureMode {
    pub fn exact_default() -> Self {
        FutureMode::ExactTruncated { threshold: 0.01, max_workers: 20 }
    }
}

fn worker_view(model: &ArrivalModel, who: NextWorker) -> (&[f64], f64) {
    match who {
        NextWorker::Old(id) => {
            let w = &model.workers[&id];
            (w.feature.as_slice(), w.quality)
        }
        NextWorker::New => (&[], model.mean_worker_quality()),
    }
}

/// Successor states over next-arrival gaps `g` in `[0, 60]` weighted by
/// `phi_r(g)`, crossed with the next-worker distribution at `now + g`.
pub fn predict_future_states_r(pool: &[PoolTask], now: Minutes, model: &ArrivalModel, mode: FutureMode) -> Result<Vec<FutureState>> {
    let (lo, hi) = model.phi_r.support();
    let dim = model.feature_sum.len();
    let mean = model.mean_worker_feature();
    let mut out = Vec::new();
    for cell in expiry_cells(pool, now, lo, hi) {
        match mode {
            FutureMode::Expectation => {
                let mut feat = vec![0.0; dim];
                let mut quality = 0.0;
                let mut mass = 0.0;
                for g in cell.start..=cell.end {
                    let pg = model.phi_r.prob(g);
                    if pg == 0.0 {
                        continue;
                    }
                    mass += pg;
                    for (who, p) in next_worker_distribution(model, now + g)? {
                        let w = pg * p;
                        let (f, q) = worker_view(model, who);
                        let f = if who == NextWorker::New { mean.as_slice() } else { f };
                        for (acc, v) in feat.iter_mut().zip(f) {
                            *acc += w * v;
                        }
                        quality += w * q;
                    }
                }
                if mass > 0.0 {
                    out.push(FutureState {
                        probability: mass,
                        time: now + cell.start,
                        worker_feature: Arc::new(FeatureVector(feat.iter().map(|v| v / mass).collect())),
                        worker_quality: quality / mass,
                    });
                }
            }
            FutureMode::ExactTruncated { threshold, max_workers } => {
                let mut acc: BTreeMap<NextWorker, f64> = BTreeMap::new();
                for g in cell.start..=cell.end {
                    let pg = model.phi_r.prob(g);
                    if pg == 0.0 {
                        continue;
                    }
                    let mut dist = next_worker_distribution(model, now + g)?;
                    dist.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    let keep = dist.iter().take(max_workers.max(1)).enumerate().filter(|(i, d)| *i == 0 || d.1 >= threshold).count();
                    dist.truncate(keep);
                    let z: f64 = dist.iter().map(|d| d.1).sum();
                    for (who, p) in dist {
                        *acc.entry(who).or_insert(0.0) += pg * p / z;
                    }
                }
                for (who, p) in acc {
                    let (f, q) = worker_view(model, who);
                    let feature = if who == NextWorker::New { mean.clone() } else { FeatureVector(f.to_vec()) };
                    out.push(FutureState { probability: p, time: now + cell.start, worker_feature: Arc::new(feature), worker_quality: q });
                }
            }
        }
    }
    Ok(out)
}

/// Double-Q target of a requester-head transition.
pub fn td_target_r(params: &QNetworkParams, gamma: f64, transition: &Transition) -> Result<f64> {
    learner::td_target(params, gamma, transition, true, 0.0)
}

pub fn train_step_r(learner: &mut DqnLearner) -> Result<f64> {
    learner.train_step()
}

/// Stores one transition per examined task with reward `gain` for the
/// completed one and 0 for the rest; all share the predicted successors.
pub fn store_feedback_r(
    learner: &mut DqnLearner,
    model: &ArrivalModel,
    mode: FutureMode,
    ctx: &FeedbackContext,
    ranked: &[usize],
    completed: Option<usize>,
    gain: f64,
) -> Result<usize> {
    if ranked.is_empty() {
        return Err(Error::InvalidInput("feedback for an empty action list".into()));
    }
    let futures = predict_future_states_r(&ctx.next_pool, ctx.now, model, mode)?;
    let mut stored = 0;
    for (action, success) in examined(ranked, completed) {
        learner.store(Transition {
            worker_id: ctx.worker_id,
            worker_feature: ctx.worker_feature.clone(),
            worker_quality: ctx.worker_quality,
            pool: Arc::clone(&ctx.pool),
            action,
            reward: if success { gain } else { 0.0 },
            timestamp: ctx.now,
            next_pool: Arc::clone(&ctx.next_pool),
            futures: futures.clone(),
        });
        stored += 1;
    }
    Ok(stored)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_closed_forms() {
        assert!((task_quality(&[0.3, 0.5], 1.0).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(task_quality(&[0.3, 0.9], f64::INFINITY).unwrap(), 0.9);
        assert!((task_quality(&[0.6, 0.8], 2.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(task_quality(&[], 2.0).unwrap(), 0.0);
        assert!(matches!(task_quality(&[0.5], 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn marginal_gain_matches_recomputation() {
        let before = task_quality(&[0.6, 0.3], 2.0).unwrap();
        let after = task_quality(&[0.6, 0.3, 0.8], 2.0).unwrap();
        assert!((marginal_gain(before, 0.8, 2.0) - (after - before)).abs() < 1e-12);
        assert_eq!(marginal_gain(0.9, 0.5, f64::INFINITY), 0.0);
    }

    #[test]
    fn quality_gain_rewards() {
        let first = task_quality(&[0.6], 2.0).unwrap();
        assert!((reward_r(0.0, Some(first)) - 0.6).abs() < 1e-12);
        let second = task_quality(&[0.6, 0.8], 2.0).unwrap();
        assert!((reward_r(first, Some(second)) - 0.4).abs() < 1e-12);
        assert_eq!(reward_r(first, None), 0.0);
    }

    fn ev(time: Minutes, worker: WorkerId) -> ArrivalEvent {
        ArrivalEvent { time, worker, feature: FeatureVector(vec![worker as f64, 1.0]), quality: 0.5 }
    }

    #[test]
    fn arrival_updates() {
        let mut m = ArrivalModel::new(2);
        update_arrival_model(&mut m, &ev(0, 1)).unwrap();
        assert_eq!((m.n_new, m.n_arrivals), (1, 1));
        update_arrival_model(&mut m, &ev(5, 2)).unwrap();
        assert_eq!(m.phi_r.count(5), 1);
        update_arrival_model(&mut m, &ev(20, 1)).unwrap();
        assert_eq!(m.phi_w.count(20), 1);
        assert!((m.p_new() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.mean_worker_feature().0, vec![1.5, 1.0]);
        assert!(update_arrival_model(&mut m, &ev(19, 3)).is_err());
    }

    #[test]
    fn singleton_and_symmetric_distributions() {
        let mut m = ArrivalModel::new(2);
        update_arrival_model(&mut m, &ev(0, 1)).unwrap();
        m.n_arrivals = 10;
        m.n_new = 1;
        let d = next_worker_distribution(&m, 30).unwrap();
        assert_eq!(d.len(), 2);
        assert!((d[0].1 - 0.9).abs() < 1e-12);
        assert_eq!(d[1], (NextWorker::New, 0.1));

        update_arrival_model(&mut m, &ev(0, 2)).unwrap();
        m.n_arrivals = 10;
        m.n_new = 1;
        let d = next_worker_distribution(&m, 30).unwrap();
        assert!((d[0].1 - 0.45).abs() < 1e-12 && (d[1].1 - 0.45).abs() < 1e-12);
    }

    #[test]
    fn empty_model_predicts_new() {
        let m = ArrivalModel::new(3);
        assert_eq!(next_worker_distribution(&m, 0).unwrap(), vec![(NextWorker::New, 1.0)]);
    }

    #[test]
    fn modes_coincide_for_one_old_worker() {
        let mut m = ArrivalModel::new(2);
        update_arrival_model(&mut m, &ev(0, 1)).unwrap();
        m.n_new = 0;
        let pool = vec![PoolTask { id: 9, feature: FeatureVector(vec![1.0]), deadline: 40, quality: 0.2 }];
        let a = predict_future_states_r(&pool, 10, &m, FutureMode::Expectation).unwrap();
        let b = predict_future_states_r(&pool, 10, &m, FutureMode::exact_default()).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x.probability - y.probability).abs() < 1e-12);
            assert_eq!(x.time, y.time);
            for (u, v) in x.worker_feature.as_slice().iter().zip(y.worker_feature.as_slice()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let mut m = ArrivalModel::new(2);
        update_arrival_model(&mut m, &ev(0, 1)).unwrap();
        update_arrival_model(&mut m, &ev(7, 2)).unwrap();
        let back = ArrivalModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
