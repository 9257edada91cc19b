//! Criterion checks shared by the oracle suites and the acceptance report.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use crowdrl::domain::FeatureVector;
use crowdrl::learner::{DqnLearner, FutureState, LearnerConfig, PoolTask, Transition};
use crowdrl::metrics::{self, Interaction, InteractionLog};
use crowdrl::qnetwork::{state_transform, NetConfig, QNetwork};
use crowdrl::requester::{next_worker_distribution, predict_future_states_r, task_quality, update_arrival_model, ArrivalEvent, ArrivalModel, FutureMode, NextWorker};
use crowdrl::tensor::{Matrix, OptimizerKind, Tape};
use crowdrl::worker::{predict_future_states_w, GapHistogram};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn random_feature(rng: &mut ChaCha8Rng, dim: usize) -> FeatureVector {
    FeatureVector((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Permutation equivariance and padding invariance of the Q-network.
pub fn permutation_equivariance(trials: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let heads = if trial % 2 == 0 { 1 } else { 4 };
        let dim = rng.gen_range(2..12);
        let net = QNetwork::new(NetConfig::new(2 * dim, 128, heads).unwrap()).unwrap();
        let params = net.init_params(&mut rng).unwrap();
        let n = rng.gen_range(1..=50);
        let worker = random_feature(&mut rng, dim);
        let tasks: Vec<FeatureVector> = (0..n).map(|_| random_feature(&mut rng, dim)).collect();
        let refs: Vec<&FeatureVector> = tasks.iter().collect();
        let base = state_transform(&worker, &refs, n, None).unwrap();
        let q = net.q_forward(&params, &base).unwrap();

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<&FeatureVector> = perm.iter().map(|&i| &tasks[i]).collect();
        let qp = net.q_forward(&params, &state_transform(&worker, &permuted, n, None).unwrap()).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            worst = worst.max((qp[j].1 - q[i].1).abs());
        }

        let padded = state_transform(&worker, &refs, n + rng.gen_range(1..20), None).unwrap();
        let qm = net.q_forward_masked(&params, &padded).unwrap();
        for (a, b) in qm.iter().zip(&q) {
            worst = worst.max((a.1 - b.1).abs());
        }
    }
    Check::new(worst <= 1e-6, format!("{trials} states, max deviation {worst:.2e}"))
}

/// Central finite differences on every parameter scalar of small networks.
pub fn gradient_check(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let (mut probes, mut skipped) = (0usize, 0usize);
    for inst in 0..instances {
        let heads = [1, 2][inst % 2];
        let mut cfg = NetConfig::new(rng.gen_range(2..7), 4 * heads, heads).unwrap();
        cfg.second_residual = inst % 3 != 0;
        let net = QNetwork::new(cfg.clone()).unwrap();
        let mut params = net.init_params(&mut rng).unwrap();
        // Nonzero biases so every code path carries gradient.
        for p in params.iter_mut() {
            p.value.mapv_inplace(|v| v + rng.gen_range(-0.1..0.1));
        }
        let n = rng.gen_range(1..6);
        let x = Matrix::from_shape_fn((n, cfg.input_dim), |_| rng.gen_range(-1.0..1.0));
        let mut mask = vec![true; n];
        if n > 2 {
            mask[n - 1] = false;
        }
        let c = Matrix::from_shape_fn((n, 1), |(i, _)| if mask[i] { rng.gen_range(-1.0..1.0) } else { 0.0 });

        let loss = |ps: &crowdrl::tensor::ParamSet| -> (f64, Vec<bool>) {
            let mut t = Tape::new(ps);
            let q = net.forward(&mut t, x.clone(), &mask).unwrap();
            ((&t.value(q) * &c).sum(), t.relu_pattern())
        };
        let mut tape = Tape::new(&params);
        let q = net.forward(&mut tape, x.clone(), &mask).unwrap();
        let grads = tape.backward(q, &c).unwrap();
        let base_pattern = tape.relu_pattern();
        drop(tape);

        for pi in 0..params.len() {
            let analytic = grads.get(pi).cloned().unwrap_or_else(|| Matrix::zeros(params.param(pi).value.dim()));
            let shape = params.param(pi).value.dim();
            for r in 0..shape.0 {
                for col in 0..shape.1 {
                    let orig = params.param(pi).value[[r, col]];
                    params.param_mut(pi).value[[r, col]] = orig + h;
                    let (lp, pp) = loss(&params);
                    params.param_mut(pi).value[[r, col]] = orig - h;
                    let (lm, pm) = loss(&params);
                    params.param_mut(pi).value[[r, col]] = orig;
                    if pp != base_pattern || pm != base_pattern {
                        skipped += 1;
                        continue;
                    }
                    let numeric = (lp - lm) / (2.0 * h);
                    let a = analytic[[r, col]];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                    worst = worst.max(rel);
                    probes += 1;
                }
            }
        }
    }
    Check::new(worst < 1e-4, format!("{probes} probes on {instances} networks ({skipped} kink crossings skipped), max rel err {worst:.2e}"))
}

/// Closed forms of the task-quality aggregate.
pub fn quality_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut ok = true;
    let mut notes = Vec::new();
    for _ in 0..200 {
        let qs: Vec<f64> = (0..rng.gen_range(1..10)).map(|_| rng.gen::<f64>()).collect();
        if task_quality(&qs, 1.0).unwrap() != qs.iter().sum::<f64>() {
            ok = false;
            notes.push("p=1 differs from the sum".to_string());
            break;
        }
    }
    let two = task_quality(&[0.6, 0.8], 2.0).unwrap();
    if (two - 1.0).abs() > 1e-9 {
        ok = false;
        notes.push(format!("p=2 on {{0.6,0.8}} = {two}"));
    }
    // Uniform sets of 1-20 qualities, taken literally. The aggregate is
    // max * (sum (q/max)^64)^(1/64), so near-ties push it above the max by
    // up to max * (n^(1/64) - 1); the bound is checked alongside.
    let (mut worst, mut over, mut bound_ok) = (0.0f64, 0, true);
    for _ in 0..1000 {
        let qs: Vec<f64> = (0..rng.gen_range(1..=20)).map(|_| rng.gen::<f64>()).collect();
        let max = qs.iter().cloned().fold(0.0, f64::max);
        let got = task_quality(&qs, 64.0).unwrap();
        let dev = got - max;
        worst = worst.max(dev.abs());
        over += (dev.abs() > 1e-3) as usize;
        bound_ok &= dev >= -1e-12 && dev <= max * ((qs.len() as f64).powf(1.0 / 64.0) - 1.0) + 1e-12;
    }
    ok &= worst <= 1e-3 && bound_ok;
    notes.push(format!(
        "p=2 -> {two:.12}; p=64 max deviation {worst:.2e} ({over}/1000 sets beyond 1e-3, all within the n^(1/64) tie bound: {bound_ok})"
    ));
    Check::new(ok, notes.join("; "))
}

pub fn random_pool(rng: &mut ChaCha8Rng, now: i64, n: usize, dim: usize, horizon: i64) -> Vec<PoolTask> {
    (0..n)
        .map(|i| PoolTask { id: i as u64, feature: random_feature(rng, dim), deadline: now + rng.gen_range(0..horizon), quality: rng.gen() })
        .collect()
}

fn random_histogram(rng: &mut ChaCha8Rng, mut h: GapHistogram) -> GapHistogram {
    let (lo, hi) = h.support();
    for _ in 0..rng.gen_range(0..200) {
        let g = if rng.gen_bool(0.1) { rng.gen_range(-5..hi + 50) } else { rng.gen_range(lo..=hi) };
        h.update(g);
    }
    h
}

/// Alive index set of `pool` at `time`.
fn alive_at(pool: &[PoolTask], time: i64) -> Vec<usize> {
    (0..pool.len()).filter(|&i| pool[i].deadline >= time).collect()
}

/// Mass, grouping and state-count properties of both future predictors.
pub fn future_state_mass(scenarios: usize, max_t: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut worst_w, mut worst_r, mut worst_brute): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut grouping_ok = true;
    let mut count_ok = true;
    let mut max_states = 0;
    for s in 0..scenarios {
        let now = rng.gen_range(0..100_000);
        let n = rng.gen_range(0..=max_t.min(40));
        let pool = random_pool(&mut rng, now, n, 3, 12_000);
        let hist = random_histogram(&mut rng, GapHistogram::same_worker());
        let f = Arc::new(FeatureVector(vec![0.0; 3]));
        let fw = predict_future_states_w(&pool, now, &hist, Arc::clone(&f), 0.5);
        worst_w = worst_w.max((fw.iter().map(|x| x.probability).sum::<f64>() - 1.0).abs());
        max_states = max_states.max(fw.len());
        count_ok &= fw.len() <= max_t + 1;

        // Brute force over every minute for a subset (it is 10k minutes each).
        if s % 10 == 0 {
            let (lo, hi) = hist.support();
            let mut groups: Vec<(Vec<usize>, f64, i64)> = Vec::new();
            for g in lo..=hi {
                let alive = alive_at(&pool, now + g);
                match groups.last_mut() {
                    Some(last) if last.0 == alive => last.1 += hist.prob(g),
                    _ => groups.push((alive, hist.prob(g), now + g)),
                }
            }
            if groups.len() != fw.len() {
                grouping_ok = false;
            }
            for (grp, st) in groups.iter().zip(&fw) {
                if grp.0 != st.alive(&pool) || grp.2 != st.time {
                    grouping_ok = false;
                }
                worst_brute = worst_brute.max((grp.1 - st.probability).abs());
            }
        }

        let mut model = ArrivalModel::new(3);
        let mut t = now - rng.gen_range(0..5000);
        for _ in 0..rng.gen_range(0..60) {
            t += rng.gen_range(0..90);
            let ev = ArrivalEvent { time: t.min(now), worker: rng.gen_range(0..8), feature: random_feature(&mut rng, 3), quality: rng.gen() };
            update_arrival_model(&mut model, &ev).unwrap();
        }
        for mode in [FutureMode::Expectation, FutureMode::exact_default()] {
            let fr = predict_future_states_r(&pool, now, &model, mode).unwrap();
            worst_r = worst_r.max((fr.iter().map(|x| x.probability).sum::<f64>() - 1.0).abs());
            if mode == FutureMode::Expectation {
                count_ok &= fr.len() <= max_t + 1;
            }
        }
    }
    let pass = worst_w <= 1e-9 && worst_r <= 1e-9 && grouping_ok && worst_brute <= 1e-12 && count_ok;
    Check::new(
        pass,
        format!(
            "{scenarios} scenarios: |mass-1| worker {worst_w:.1e}, requester {worst_r:.1e}; grouping equals brute force: {grouping_ok} (prob diff {worst_brute:.1e}); max states {max_states} (cap {})",
            max_t + 1
        ),
    )
}

pub fn brute_metrics(l: &InteractionLog, k: usize) -> [f64; 6] {
    let n = l.entries.len() as f64;
    let (mut c, mut kc, mut nc, mut g, mut kg, mut ng) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for e in &l.entries {
        for r in 1..=e.list_len {
            let hit = e.completed_rank == Some(r);
            let y = if hit { 1.0 } else { 0.0 };
            let gain = if hit { e.gain } else { 0.0 };
            let disc = 1.0 / ((1 + r) as f64).log2();
            c += y;
            nc += y * disc;
            g += gain;
            ng += gain * disc;
            if r <= k {
                kc += y * disc;
                kg += gain * disc;
            }
        }
    }
    [c / n, kc / n, nc / n, g, kg, ng]
}

pub fn metric_oracle(logs: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst: f64 = 0.0;
    for _ in 0..logs {
        let n = rng.gen_range(1..80);
        let entries = (0..n)
            .map(|i| {
                let len = rng.gen_range(1..15);
                let rank = if rng.gen_bool(0.5) { Some(rng.gen_range(1..=len)) } else { None };
                Interaction { time: i, list_len: len, completed_rank: rank, gain: if rank.is_some() { rng.gen() } else { 0.0 }, pool_size: len }
            })
            .collect();
        let l = InteractionLog { entries };
        let k = rng.gen_range(1..10);
        let got = [
            metrics::cr(&l).unwrap(),
            metrics::kcr(&l, k).unwrap(),
            metrics::ndcg_cr(&l).unwrap(),
            metrics::qg(&l),
            metrics::kqg(&l, k),
            metrics::ndcg_qg(&l),
        ];
        for (a, b) in got.iter().zip(brute_metrics(&l, k)) {
            worst = worst.max((a - b).abs());
        }
    }
    Check::new(worst <= 1e-12, format!("{logs} logs, max deviation {worst:.1e}"))
}

/// With gamma = 0 the learner regresses Q(s, a) onto the observed reward.
/// Rewards are a fixed function of (s, a); with prioritized replay the
/// fixed point under noisy rewards is shifted toward the rarer outcome.
pub fn learning_sanity(steps: u64) -> Check {
    let mut notes = Vec::new();
    let mut pass = true;
    for with_quality in [false, true] {
        let mut rng = ChaCha8Rng::seed_from_u64(606 + with_quality as u64);
        let dim = 6;
        let net = NetConfig::new(2 * dim + if with_quality { 2 } else { 0 }, 32, 4).unwrap();
        let cfg = LearnerConfig { gamma: 0.0, batch_size: 32, learning_rate: 1e-3, optimizer: OptimizerKind::Adam, ..LearnerConfig::worker_default() };
        let mut learner = DqnLearner::new(net, cfg, with_quality, 7).unwrap();
        // Five states, each a worker facing a three-task pool.
        let states: Vec<(FeatureVector, Arc<Vec<PoolTask>>)> = (0..5)
            .map(|_| (FeatureVector((0..dim).map(|_| rng.gen::<f64>()).collect()), Arc::new(random_pool(&mut rng, 0, 3, dim, 10_000))))
            .collect();
        let reward = |s: usize, a: usize| -> f64 {
            if with_quality {
                ((s * 3 + a) as f64 * 0.37).fract()
            } else {
                ((s + a) % 2) as f64
            }
        };
        let mut pairs = BTreeSet::new();
        for _ in 0..200 {
            let (s, a) = (rng.gen_range(0..5), rng.gen_range(0..3));
            pairs.insert((s, a));
            let (f, pool) = &states[s];
            learner.store(Transition {
                worker_id: s as u64,
                worker_feature: f.clone(),
                worker_quality: 0.6,
                pool: Arc::clone(pool),
                action: a,
                reward: reward(s, a),
                timestamp: 0,
                next_pool: Arc::clone(pool),
                futures: vec![FutureState { probability: 1.0, time: 10, worker_feature: Arc::new(f.clone()), worker_quality: 0.6 }],
            });
        }
        for _ in 0..steps {
            learner.train_step().unwrap();
        }
        let mut worst: f64 = 0.0;
        for &(s, a) in &pairs {
            let (f, pool) = &states[s];
            let q = learner.q_values(f, 0.6, pool).unwrap()[a];
            worst = worst.max((q - reward(s, a)).abs());
        }
        pass &= worst <= 0.05;
        notes.push(format!("{} head: max |Q - r| {worst:.4} over {} pairs", if with_quality { "requester" } else { "worker" }, pairs.len()));
    }
    Check::new(pass, format!("{steps} steps; {}", notes.join("; ")))
}

/// Normalization of both gap histograms, the next-worker distribution and
/// the first-timer rate.
pub fn arrival_invariants(streams: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut worst_phi: f64 = 0.0;
    let mut worst_next: f64 = 0.0;
    let mut pnew_exact = true;
    let mut new_exact = true;
    for _ in 0..streams {
        let mut model = ArrivalModel::new(2);
        let n = rng.gen_range(1..150);
        let mut t = 0;
        let mut seen = BTreeSet::new();
        for _ in 0..n {
            t += rng.gen_range(0..200);
            let w = rng.gen_range(0..30);
            seen.insert(w);
            update_arrival_model(&mut model, &ArrivalEvent { time: t, worker: w, feature: random_feature(&mut rng, 2), quality: rng.gen() }).unwrap();
        }
        for h in [&model.phi_w, &model.phi_r] {
            let (lo, hi) = h.support();
            worst_phi = worst_phi.max((h.mass(lo, hi) - 1.0).abs());
            let per: f64 = (lo..=hi).map(|g| h.prob(g)).sum();
            worst_phi = worst_phi.max((per - 1.0).abs());
        }
        pnew_exact &= model.p_new() == seen.len() as f64 / n as f64;
        let dist = next_worker_distribution(&model, t + rng.gen_range(0..3000)).unwrap();
        worst_next = worst_next.max((dist.iter().map(|d| d.1).sum::<f64>() - 1.0).abs());
        let p_new = dist.iter().find(|d| d.0 == NextWorker::New).map_or(0.0, |d| d.1);
        new_exact &= p_new == model.p_new();
    }
    let pass = worst_phi <= 1e-9 && worst_next <= 1e-9 && pnew_exact && new_exact;
    Check::new(
        pass,
        format!("{streams} streams: |phi mass-1| {worst_phi:.1e}, |next mass-1| {worst_next:.1e}, p_new = k/n exactly: {pnew_exact}, NEW gets p_new exactly: {new_exact}"),
    )
}
