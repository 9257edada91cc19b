mod common;

use std::sync::Arc;

use crowdrl::domain::FeatureVector;
use crowdrl::learner::{td_target, FutureState, LearnerConfig, PoolTask, Transition};
use crowdrl::qnetwork::{NetConfig, QNetworkParams};
use crowdrl::requester::{predict_future_states_r, update_arrival_model, ArrivalEvent, ArrivalModel, FutureMode};
use crowdrl::worker::{predict_future_states_w, td_target_w, GapHistogram};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn quality_closed_forms() {
    use crowdrl::requester::task_quality;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    assert!((task_quality(&[0.6, 0.8], 2.0).unwrap() - 1.0).abs() < 1e-9);
    for _ in 0..1000 {
        let qs: Vec<f64> = (0..rng.gen_range(1..=20)).map(|_| rng.gen::<f64>()).collect();
        assert_eq!(task_quality(&qs, 1.0).unwrap(), qs.iter().sum::<f64>());
        let max = qs.iter().cloned().fold(0.0, f64::max);
        let q64 = task_quality(&qs, 64.0).unwrap();
        // Ties lift the aggregate by at most the factor n^(1/64).
        assert!(q64 >= max - 1e-12 && q64 <= max * (qs.len() as f64).powf(1.0 / 64.0) + 1e-12);
        // With a clear maximum the aggregate is within 1e-3 of it.
        let second = qs.iter().cloned().filter(|&q| q < max).fold(0.0, f64::max);
        if qs.iter().filter(|&&q| q == max).count() == 1 && second <= 0.9 * max {
            assert!((q64 - max).abs() <= 1e-3, "{qs:?}");
        }
        // Increasing p moves the aggregate monotonically toward the max.
        let q8 = task_quality(&qs, 8.0).unwrap();
        assert!(q8 + 1e-12 >= q64);
    }
}

#[test]
fn future_states_carry_unit_mass_and_match_brute_force() {
    let c = common::future_state_mass(1000, 128);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn gamma_zero_regresses_onto_rewards() {
    let c = common::learning_sanity(5000);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn arrival_model_invariants() {
    let c = common::arrival_invariants(300);
    assert!(c.pass, "{}", c.detail);
}

/// The grouped worker target equals a per-minute sum of double-Q values.
#[test]
fn grouped_target_equals_per_minute_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dim = 3;
    let params = QNetworkParams::new(NetConfig::new(2 * dim, 8, 2).unwrap(), &mut rng).unwrap();
    let mut target = params.clone();
    for p in target.target.iter_mut() {
        p.value.mapv_inplace(|v| v * 0.9 + 0.01);
    }
    for _ in 0..20 {
        let now = 1000;
        let n = rng.gen_range(1..8);
        let pool = Arc::new(common::random_pool(&mut rng, now, n, dim, 12_000));
        let mut hist = GapHistogram::same_worker();
        for _ in 0..50 {
            hist.update(rng.gen_range(1..10_080));
        }
        let f = Arc::new(FeatureVector(vec![0.2, 0.4, 0.4]));
        let futures = predict_future_states_w(&pool, now, &hist, Arc::clone(&f), 0.5);
        let t = Transition {
            worker_id: 1,
            worker_feature: (*f).clone(),
            worker_quality: 0.5,
            pool: Arc::clone(&pool),
            action: 0,
            reward: 1.0,
            timestamp: now,
            next_pool: Arc::clone(&pool),
            futures,
        };
        let gamma = 0.3;
        let grouped = td_target_w(&target, gamma, &t).unwrap();

        let mut brute = 0.0;
        for g in 1..=10_080 {
            let alive: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].deadline >= now + g).collect();
            if alive.is_empty() {
                continue;
            }
            let rows = crowdrl::learner::state_rows(&f, 0.5, &pool, &alive, false);
            let online = target.net.eval_rows(&target.online, rows.clone()).unwrap();
            let best = crowdrl::learner::argmax(&online);
            brute += hist.prob(g) * target.net.eval_rows(&target.target, rows).unwrap()[best];
        }
        let want = 1.0 + gamma * brute;
        assert!((grouped - want).abs() < 1e-9, "{grouped} vs {want}");
    }
}

/// Expectation-mode requester states average the per-gap, per-worker
/// features with weights phi_r(g) * Pr(w | g).
#[test]
fn requester_expectation_matches_per_gap_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..30 {
        let now = 5000;
        let mut model = ArrivalModel::new(2);
        let mut t = 4000;
        for _ in 0..40 {
            t += rng.gen_range(0..40);
            let ev = ArrivalEvent { time: t.min(now), worker: rng.gen_range(0..5), feature: FeatureVector(vec![rng.gen(), rng.gen()]), quality: rng.gen() };
            update_arrival_model(&mut model, &ev).unwrap();
        }
        let pool: Vec<PoolTask> = common::random_pool(&mut rng, now, 4, 2, 80);
        let states = predict_future_states_r(&pool, now, &model, FutureMode::Expectation).unwrap();
        let mass: f64 = states.iter().map(|s| s.probability).sum();
        assert!((mass - 1.0).abs() < 1e-9);
        // Expected next-worker quality over all gaps, two ways.
        let via_states: f64 = states.iter().map(|s| s.probability * s.worker_quality).sum();
        let mut direct = 0.0;
        for g in 0..=60 {
            for (who, p) in crowdrl::requester::next_worker_distribution(&model, now + g).unwrap() {
                let q = match who {
                    crowdrl::requester::NextWorker::Old(id) => model.workers()[&id].quality,
                    crowdrl::requester::NextWorker::New => model.mean_worker_quality(),
                };
                direct += model.phi_r.prob(g) * p * q;
            }
        }
        assert!((via_states - direct).abs() < 1e-9, "{via_states} vs {direct}");
    }
}

/// Cells whose mass falls at or below the floor are left out of the target.
#[test]
fn future_mass_floor_drops_light_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = QNetworkParams::new(NetConfig::new(4, 8, 2).unwrap(), &mut rng).unwrap();
    let pool = Arc::new(vec![PoolTask { id: 1, feature: FeatureVector(vec![1.0, 0.0]), deadline: 100, quality: 0.0 }]);
    let fs = |p| FutureState { probability: p, time: 10, worker_feature: Arc::new(FeatureVector(vec![0.0, 1.0])), worker_quality: 0.5 };
    let t = Transition {
        worker_id: 1,
        worker_feature: FeatureVector(vec![0.0, 1.0]),
        worker_quality: 0.5,
        pool: Arc::clone(&pool),
        action: 0,
        reward: 0.0,
        timestamp: 0,
        next_pool: pool,
        futures: vec![fs(0.995), fs(0.005)],
    };
    let full = td_target(&params, 0.5, &t, false, 0.0).unwrap();
    let pruned = td_target(&params, 0.5, &t, false, 0.01).unwrap();
    assert!((pruned - full * 0.995).abs() < 1e-12);
    let _ = LearnerConfig::worker_default();
}
