//! Acceptance suite: one test per criterion, each printing a pass/fail line.

use rand::Rng;
use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};
use toolrl::demo::{self, DemoItem, DemoSet, EdpConfig, Provenance, ToolMixture, Trajectory};
use toolrl::env::{EnvConfig, EnvState};
use toolrl::experiment::{self, AblationMode, ExperimentConfig, ExperimentReport};
use toolrl::mar::{self, MarConfig, MarState, RewardGroup};
use toolrl::policy::{self, History, PolicyParams};
use toolrl::pool::{self, InvocationRequest, McPool, PoolConfig, PoolError, MAX_ATTEMPTS};
use toolrl::rng;

const SEEDS: usize = 5;

/// Written straight to stderr so the line shows up even when output is captured.
fn report(id: u32, name: &str, ok: bool, elapsed: Duration, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "[acceptance] criterion {id} {verdict}: {name} ({:.1}s) {detail}",
        elapsed.as_secs_f64()
    );
}

fn shipped() -> (ExperimentConfig, EnvConfig) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    let env = cfg.load_env().unwrap();
    (cfg, env)
}

/// Reports for (mode, seed offset) pipelines, shared between criteria.
fn run(mode: AblationMode, offset: usize) -> ExperimentReport {
    static CACHE: OnceLock<Mutex<HashMap<(AblationMode, usize), ExperimentReport>>> =
        OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(r) = cache.lock().unwrap().get(&(mode, offset)) {
        return r.clone();
    }
    let (mut cfg, env) = shipped();
    cfg.seed += offset as u64;
    let r = experiment::run_experiment(&cfg, &env, mode, 1)
        .unwrap()
        .report;
    cache.lock().unwrap().insert((mode, offset), r.clone());
    r
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_1_mar_arithmetic() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    let mut r = rng::stream(1, &[0xacc1]);
    for case in 0..2000 {
        let m = r.gen_range(1..8);
        let eps = r.gen_range(0.01..0.9);
        let ema: Vec<f64> = (0..m).map(|_| r.gen_range(0.001..1.0)).collect();
        let batch: Vec<f64> = (0..m).map(|_| r.gen_range(0.0..=1.0)).collect();
        let hat = mar::deviation_score(&batch, &ema, eps);
        check(
            "clip bounds",
            hat.iter()
                .all(|&w| w >= 1.0 - eps - 1e-12 && w <= 1.0 + eps + 1e-12),
        );
        let mut s = MarState::new(
            m,
            MarConfig {
                epsilon: eps,
                beta: 0.9,
            },
        );
        s.ema = Some(ema.clone());
        let fixed = mar::update_ema(&ema, &s).ema.unwrap();
        check(
            "ema fixed point",
            fixed.iter().zip(&ema).all(|(a, b)| (a - b).abs() <= 1e-15),
        );
        let w = mar::normalize_weights(&hat, &s).weights;
        check(
            "weight simplex",
            (w.iter().sum::<f64>() - 1.0).abs() < 1e-9 && w.iter().all(|&x| x > 0.0),
        );

        let g = r.gen_range(2..10);
        let mut rows: Vec<Vec<f64>> = (0..g)
            .map(|_| (0..m).map(|_| r.gen_range(0.0..=1.0)).collect())
            .collect();
        if case % 5 == 0 {
            for row in &mut rows {
                row[0] = 0.5;
            }
        }
        let adv = mar::decoupled_advantages(&RewardGroup::new(rows.clone()).unwrap());
        for k in 0..m {
            let col: Vec<f64> = adv.iter().map(|row| row[k]).collect();
            let mu = mean(&col);
            let sd = (col.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / g as f64).sqrt();
            let raw: Vec<f64> = rows.iter().map(|row| row[k]).collect();
            let raw_mu = mean(&raw);
            let raw_sd = (raw.iter().map(|x| (x - raw_mu).powi(2)).sum::<f64>() / g as f64).sqrt();
            check("column mean 0", mu.abs() < 1e-9);
            if raw_sd < mar::DEGENERATE_STD {
                check("degenerate guard", col.iter().all(|&a| a == 0.0));
            } else {
                check("column std 1", (sd - 1.0).abs() < 1e-9);
            }
        }
        let c = r.gen_range(0.01..100.0);
        let k = r.gen_range(0..m);
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| if j == k { v * c } else { v })
                    .collect()
            })
            .collect();
        let adv2 = mar::decoupled_advantages(&RewardGroup::new(scaled).unwrap());
        check(
            "scale invariance",
            adv.iter()
                .zip(&adv2)
                .all(|(a, b)| (a[k] - b[k]).abs() < 1e-9),
        );
        let agg = mar::aggregate_advantages(&adv, &w);
        check("aggregate mean 0", mean(&agg).abs() < 1e-9);
    }
    let elapsed = start.elapsed();
    failures.dedup();
    let ok = failures.is_empty() && elapsed < Duration::from_secs(1);
    let detail = if failures.is_empty() {
        "all checks held".to_string()
    } else {
        format!("failed checks: {failures:?}")
    };
    report(1, "MAR arithmetic exactness", ok, elapsed, &detail);
    assert!(ok, "{failures:?}");
}

fn random_demos(env: &EnvConfig, n: usize, r: &mut impl Rng) -> DemoSet {
    let items = (0..n)
        .map(|_| {
            let initial = env.sample_state(r);
            let steps = (0..r.gen_range(0..=env.max_horizon))
                .map(|_| {
                    let task = r.gen_range(0..env.num_tasks());
                    let tools: Vec<_> = env.tools_for_task(task).collect();
                    (task, tools[r.gen_range(0..tools.len())])
                })
                .collect();
            DemoItem {
                trajectory: Trajectory::replay(env, initial, steps).unwrap(),
                provenance: Provenance::ORACLE,
            }
        })
        .collect();
    DemoSet { items }
}

fn sorted<T: Ord + Clone>(v: &[T]) -> Vec<T> {
    let mut v = v.to_vec();
    v.sort();
    v
}

#[test]
fn criterion_2_edp_distribution() {
    let start = Instant::now();
    let mut worst_dev: f64 = 0.0;
    let mut r = rng::stream(2, &[0xacc2]);
    for alpha in [0.0, 0.4, 1.0] {
        let mix = ToolMixture::new(vec![0, 1, 2], &[1.0, 0.0, 0.0], alpha).unwrap();
        let expected = [1.0 - alpha + alpha / 3.0, alpha / 3.0, alpha / 3.0];
        let mut counts = [0usize; 3];
        for _ in 0..50_000 {
            counts[mix.sample(&mut r)] += 1;
        }
        for (c, e) in counts.iter().zip(expected) {
            worst_dev = worst_dev.max((*c as f64 / 50_000.0 - e).abs());
        }
    }
    let mc_ok = worst_dev <= 0.01;

    let env = EnvConfig::default();
    let mut bad_sets = 0;
    for _ in 0..1000 {
        let n = r.gen_range(1..8);
        let demos = random_demos(&env, n, &mut r);
        let cfg = EdpConfig {
            alpha_t: r.gen_range(0.0..=1.0),
            alpha_m: 0.0,
            seed: r.gen(),
        };
        let out = demo::perturb_order(&env, &demos, &cfg).unwrap();
        let mut ok = out.items[..n] == demos.items[..] && out.len() <= 2 * n;
        let mut used = vec![false; n];
        for copy in &out.items[n..] {
            let m = sorted(&copy.trajectory.steps);
            match (0..n).find(|&i| {
                !used[i]
                    && demos.items[i].initial() == copy.initial()
                    && sorted(&demos.items[i].trajectory.steps) == m
            }) {
                Some(i) => used[i] = true,
                None => ok = false,
            }
        }
        ok &= out.all_replay_consistent(&env);
        bad_sets += usize::from(!ok);
    }
    let elapsed = start.elapsed();
    let ok = mc_ok && bad_sets == 0 && elapsed < Duration::from_secs(30);
    report(
        2,
        "EDP distribution correctness",
        ok,
        elapsed,
        &format!("max mixture deviation {worst_dev:.4}, property failures {bad_sets}/1000"),
    );
    assert!(ok);
}

#[test]
fn criterion_3_diversity() {
    let start = Instant::now();
    let (mut full_d, mut full_h, mut base_d, mut base_h, mut base_ident) =
        (vec![], vec![], vec![], vec![], vec![]);
    let mut majority = true;
    for s in 0..SEEDS {
        let f = run(AblationMode::Full, s).eval.diversity;
        let b = run(AblationMode::NoEdp, s).eval.diversity;
        full_d.push(f.distinct_fraction);
        full_h.push(f.mean_tool_entropy);
        base_d.push(b.distinct_fraction);
        base_h.push(b.mean_tool_entropy);
        base_ident.push(b.identical_fraction);
        majority &= b.majority_identical();
    }
    let elapsed = start.elapsed();
    let ok = mean(&full_d) > mean(&base_d)
        && mean(&full_h) > mean(&base_h)
        && majority
        && elapsed < Duration::from_secs(600);
    report(
        3,
        "diversity analog",
        ok,
        elapsed,
        &format!(
            "distinct {:.3} vs {:.3}, tool entropy {:.3} vs {:.3}, no-EDP identical share {:.3}",
            mean(&full_d),
            mean(&base_d),
            mean(&full_h),
            mean(&base_h),
            mean(&base_ident)
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_4_reward_hacking() {
    let start = Instant::now();
    let worst = |mode| median((0..SEEDS).map(|s| run(mode, s).eval.worst_metric).collect());
    let full = worst(AblationMode::Full);
    let vanilla = worst(AblationMode::NoMar);
    let no_decouple = worst(AblationMode::NoDecouple);
    let no_weights = worst(AblationMode::NoWeights);
    let elapsed = start.elapsed();
    let ok = full > vanilla
        && full >= no_decouple
        && full >= no_weights
        && elapsed < Duration::from_secs(900);
    report(
        4,
        "reward-hacking analog",
        ok,
        elapsed,
        &format!(
            "median worst metric: mar {full:.4}, vanilla {vanilla:.4}, no_decouple {no_decouple:.4}, no_weights {no_weights:.4}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_5_policy_gradient() {
    let start = Instant::now();
    let env = EnvConfig::default();
    let mut r = rng::stream(5, &[0xacc5]);
    let (mut worst_rel, mut worst_score): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let mut params = PolicyParams::zeros(&env);
        for v in &mut params.theta {
            *v = r.gen_range(-1.5..1.5);
        }
        let mut state = env.sample_state(&mut r);
        let mut history = History::new(env.num_tasks());
        for _ in 0..r.gen_range(0..env.max_horizon) {
            let tool = r.gen_range(0..env.num_tools());
            history.record(env.tools[tool].task);
            state = env.apply_tool(&state, tool).unwrap();
        }
        let valid = env.valid_actions(&state);
        let action = valid[r.gen_range(0..valid.len())];
        let grad = policy::log_prob_grad(&params, &env, &state, &history, action).unwrap();
        let h = 1e-5;
        let mut diff = 0.0;
        let mut norm = 0.0;
        let mut p = params.clone();
        for (i, g) in grad.iter().enumerate() {
            let orig = p.theta[i];
            p.theta[i] = orig + h;
            let up = policy::log_prob(&p, &env, &state, &history, action);
            p.theta[i] = orig - h;
            let down = policy::log_prob(&p, &env, &state, &history, action);
            p.theta[i] = orig;
            let fd = (up - down) / (2.0 * h);
            diff += (g - fd).powi(2);
            norm += fd * fd;
        }
        worst_rel = worst_rel.max(diff.sqrt() / norm.sqrt().max(1e-12));

        let probs = policy::action_distribution(&params, &env, &state, &history);
        let mut total = vec![0.0; params.theta.len()];
        for a in &valid {
            let g = policy::log_prob_grad(&params, &env, &state, &history, *a).unwrap();
            for (t, v) in total.iter_mut().zip(g) {
                *t += probs[env.action_index(*a)] * v;
            }
        }
        worst_score = total.iter().fold(worst_score, |m, v| m.max(v.abs()));
    }
    let elapsed = start.elapsed();
    let ok = worst_rel < 1e-4 && worst_score < 1e-9 && elapsed < Duration::from_secs(5);
    report(
        5,
        "policy gradient correctness",
        ok,
        elapsed,
        &format!(
            "max relative error {worst_rel:.2e}, max score-function residual {worst_score:.2e}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_6_pool_protocol() {
    let start = Instant::now();
    let (cfg, env) = shipped();
    let env = Arc::new(env);
    let pool_cfg = PoolConfig {
        num_resources: 8,
        failure_rate: 0.1,
        jitter_us: 100,
        ..cfg.seeded().pool
    };
    let p = McPool::new(pool_cfg, env.clone()).unwrap();
    let requests: Vec<InvocationRequest> = (0..512)
        .map(|i| InvocationRequest {
            request_id: i,
            tool: i as usize % env.num_tools(),
            input: env.sample_state(&mut rng::stream(6, &[i])),
            timeout: None,
        })
        .collect();
    let results = pool::run_workload(&p, &requests, 512);
    let stats = p.stats();
    let direct: Vec<EnvState> = requests
        .iter()
        .map(|r| env.apply_tool(&r.input, r.tool).unwrap())
        .collect();
    let transparent = results.iter().zip(&direct).all(|(r, d)| match r {
        Ok(s) => s == d,
        Err(PoolError::ExhaustedRetries { trace, .. }) => trace.len() == MAX_ATTEMPTS as usize,
        Err(_) => false,
    });
    let bound =
        |k: u64, p: f64| (k as f64 - 512.0 * p).abs() <= 3.0 * (512.0 * p * (1.0 - p)).sqrt();
    let elapsed = start.elapsed();
    let ok = stats.exclusion_violations == 0
        && stats.max_attempts_seen <= MAX_ATTEMPTS
        && stats.attempts_histogram.iter().sum::<u64>() == 512
        && stats.free_resources == 8
        && stats.in_flight == 0
        && transparent
        && bound(stats.retried_requests, 0.1)
        && bound(stats.exhausted_requests, 0.001)
        && elapsed < Duration::from_secs(60);
    report(
        6,
        "MC-Pool protocol",
        ok,
        elapsed,
        &format!(
            "violations {}, retried {}, exhausted {}, attempts {:?}, peak concurrency {}",
            stats.exclusion_violations,
            stats.retried_requests,
            stats.exhausted_requests,
            stats.attempts_histogram,
            stats.max_concurrency
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_7_determinism() {
    let start = Instant::now();
    let (cfg, env) = shipped();
    let digest = |workers| {
        experiment::run_experiment(&cfg, &env, AblationMode::Full, workers)
            .unwrap()
            .report
            .digest()
    };
    let a = digest(1);
    let b = digest(1);
    let c = digest(4);
    let elapsed = start.elapsed();
    let ok = a == b && b == c && elapsed < Duration::from_secs(600);
    report(
        7,
        "end-to-end determinism",
        ok,
        elapsed,
        &format!("digests {} / {} / {}", &a[..12], &b[..12], &c[..12]),
    );
    assert!(ok);
}
