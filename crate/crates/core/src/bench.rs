//! Wall-clock cost of one learning update as the pool grows.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::FeatureVector;
use crate::error::{Error, Result};
use crate::learner::{DqnLearner, LearnerConfig, PoolTask, Transition};
use crate::qnetwork::NetConfig;
use crate::worker::{predict_future_states_w, GapHistogram};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub feature_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { feature_dim: 28, width: 128, heads: 4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub pool_size: usize,
    pub mean_ms: f64,
    pub samples_ms: Vec<f64>,
}

/// Times one update per repetition: future-state prediction, the
/// double-Q target over those states, and a forward/backward/optimizer
/// step on the transition. Task deadlines lie beyond the return-gap
/// support, so each transition has a single future state.
pub fn bench_update_latency(pool_sizes: &[usize], reps: usize, cfg: &BenchConfig) -> Result<Vec<LatencyRow>> {
    if pool_sizes.iter().any(|&n| n == 0) || reps == 0 {
        return Err(Error::InvalidInput("pool sizes and repetitions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut hist = GapHistogram::same_worker();
    for _ in 0..500 {
        hist.update(rng.gen_range(60..5000));
    }
    let feature = |rng: &mut ChaCha8Rng| FeatureVector((0..cfg.feature_dim).map(|_| rng.gen::<f64>()).collect());
    let mut rows = Vec::with_capacity(pool_sizes.len());
    for &n in pool_sizes {
        let net = NetConfig::new(2 * cfg.feature_dim, cfg.width, cfg.heads)?;
        let lc = LearnerConfig { batch_size: 1, ..LearnerConfig::worker_default() };
        let mut learner = DqnLearner::new(net, lc, false, cfg.seed)?;
        let now = 0;
        let pool: Arc<Vec<PoolTask>> = Arc::new(
            (0..n)
                .map(|i| PoolTask { id: i as u64, feature: feature(&mut rng), deadline: now + 20_000 + i as i64, quality: 0.0 })
                .collect(),
        );
        let worker = feature(&mut rng);
        let mut samples = Vec::with_capacity(reps);
        for r in 0..reps {
            let t0 = Instant::now();
            let futures = predict_future_states_w(&pool, now, &hist, Arc::new(worker.clone()), 0.5);
            learner.store(Transition {
                worker_id: 1,
                worker_feature: worker.clone(),
                worker_quality: 0.5,
                pool: Arc::clone(&pool),
                action: r % n,
                reward: (r % 2) as f64,
                timestamp: now,
                next_pool: Arc::clone(&pool),
                futures,
            });
            learner.train_step()?;
            samples.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        let mean_ms = samples.iter().sum::<f64>() / reps as f64;
        log::info!("pool {n}: {mean_ms:.2} ms per update");
        rows.push(LatencyRow { pool_size: n, mean_ms, samples_ms: samples });
    }
    Ok(rows)
}

pub fn latency_csv(rows: &[LatencyRow]) -> String {
    let mut s = String::from("pool_size,mean_ms\n");
    for r in rows {
        s.push_str(&format!("{},{}\n", r.pool_size, r.mean_ms));
    }
    s
}
