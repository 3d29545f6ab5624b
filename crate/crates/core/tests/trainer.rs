mod common;

use common::{golden, sha256_hex};
use std::sync::Arc;
use toolrl::env::{Action, EnvConfig, EnvState};
use toolrl::mar::{MarConfig, MarState, RewardMode};
use toolrl::policy::{self, History, PolicyParams};
use toolrl::pool::{McPool, PoolConfig, PoolError};
use toolrl::rng;
use toolrl::trainer::{self, TrainConfig, TrainError};

fn pool(env: &EnvConfig, cfg: PoolConfig) -> McPool {
    McPool::new(cfg, Arc::new(env.clone())).unwrap()
}

#[test]
fn five_step_reports_are_pinned() {
    let env = EnvConfig::default();
    let train = TrainConfig {
        steps: 5,
        seed: 2024,
        ..Default::default()
    };
    let p = pool(&env, PoolConfig::default());
    let out = trainer::train(&PolicyParams::zeros(&env), &train, &env, Some(&p)).unwrap();
    let lines: Vec<String> = out
        .reports
        .iter()
        .map(|r| {
            format!(
                "{} {}",
                r.step,
                sha256_hex(serde_json::to_string(r).unwrap().as_bytes())
            )
        })
        .collect();
    golden("step_reports_5.txt", &(lines.join("\n") + "\n"));
}

#[test]
fn pooled_and_direct_training_agree() {
    let env = EnvConfig::default();
    let train = TrainConfig {
        batch_size: 16,
        steps: 3,
        workers: 4,
        seed: 5,
        ..Default::default()
    };
    let faulty = pool(
        &env,
        PoolConfig {
            failure_rate: 0.02,
            ..Default::default()
        },
    );
    let start = PolicyParams::zeros(&env);
    let pooled = trainer::train(&start, &train, &env, Some(&faulty)).unwrap();
    let direct = trainer::train(&start, &train, &env, None).unwrap();
    assert_eq!(pooled.params, direct.params);
    assert_eq!(pooled.reports, direct.reports);
    let stats = faulty.stats();
    assert_eq!(stats.exclusion_violations, 0);
    assert!(stats.retried_requests > 0);
}

#[test]
fn exhausted_retries_surface_as_step_errors() {
    let env = EnvConfig::default();
    let broken = pool(
        &env,
        PoolConfig {
            failure_rate: 1.0 - 1e-12,
            ..Default::default()
        },
    );
    let train = TrainConfig {
        batch_size: 4,
        steps: 1,
        ..Default::default()
    };
    let err = trainer::train(&PolicyParams::zeros(&env), &train, &env, Some(&broken)).unwrap_err();
    assert!(
        matches!(err, TrainError::Pool(PoolError::ExhaustedRetries { .. })),
        "{err}"
    );
    let stats = broken.stats();
    assert_eq!(stats.free_resources, stats.resources.len());
}

#[test]
fn in_flight_rollouts_stay_under_the_cap() {
    let env = EnvConfig::default();
    let p = pool(
        &env,
        PoolConfig {
            num_resources: 2,
            jitter_us: 50,
            ..Default::default()
        },
    );
    let train = TrainConfig {
        batch_size: 8,
        group_size: 4,
        max_parallel_rollouts: 3,
        steps: 2,
        workers: 8,
        ..Default::default()
    };
    let out = trainer::train(&PolicyParams::zeros(&env), &train, &env, Some(&p)).unwrap();
    assert!(out.max_in_flight <= 3);
    assert!(p.stats().max_concurrency <= 2);
}

#[test]
fn single_metric_collapses_mar_onto_vanilla() {
    let mut env = EnvConfig::default();
    env.metrics.truncate(1);
    let start = PolicyParams::zeros(&env);
    let run = |mode| {
        let train = TrainConfig {
            batch_size: 16,
            steps: 3,
            reward_mode: mode,
            seed: 3,
            ..Default::default()
        };
        trainer::train(&start, &train, &env, None).unwrap().params
    };
    let a = run(RewardMode::Mar);
    for mode in [
        RewardMode::Vanilla,
        RewardMode::NoDecouple,
        RewardMode::NoWeights,
    ] {
        let b = run(mode);
        let max = a
            .theta
            .iter()
            .zip(&b.theta)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-9, "{mode}: {max}");
    }
}

/// Probability that the policy applies `tool` once and then stops.
fn target_probability(
    params: &PolicyParams,
    env: &EnvConfig,
    states: &[EnvState],
    tool: usize,
) -> f64 {
    let task = env.tools[tool].task;
    let total: f64 = states
        .iter()
        .map(|s| {
            let h0 = History::new(env.num_tasks());
            let p0 = policy::action_distribution(params, env, s, &h0)
                [env.action_index(Action::Tool { task, tool })];
            let next = env.apply_tool(s, tool).unwrap();
            let h1 = History::from_steps(env.num_tasks(), &[(task, tool)]);
            p0 * policy::action_distribution(params, env, &next, &h1)
                [env.action_index(Action::Terminate)]
        })
        .sum();
    total / states.len() as f64
}

#[test]
fn policy_gradient_raises_the_rewarded_sequence() {
    let env = EnvConfig::default();
    let tool = 0;
    let target = vec![(env.tools[tool].task, tool)];
    let probe: Vec<EnvState> = (0..64)
        .map(|i| env.sample_state(&mut rng::stream(77, &[i])))
        .collect();
    let steps = 8;
    let mut curves = Vec::new();
    for seed in 0..5 {
        let train = TrainConfig {
            batch_size: 32,
            group_size: 8,
            lr: 5.0,
            reward_mode: RewardMode::Vanilla,
            seed,
            ..Default::default()
        };
        let reward = |t: &toolrl::demo::Trajectory| vec![f64::from(u8::from(t.steps == target))];
        let mut params = PolicyParams::zeros(&env);
        let mut mar = MarState::new(1, MarConfig::default());
        let mut curve = vec![target_probability(&params, &env, &probe, tool)];
        for step in 0..steps {
            let out =
                trainer::train_step_with_reward(&params, &mar, step, &train, &env, None, &reward)
                    .unwrap();
            params = out.params;
            mar = out.mar;
            curve.push(target_probability(&params, &env, &probe, tool));
        }
        curves.push(curve);
    }
    let median: Vec<f64> = (0..=steps)
        .map(|k| {
            let mut v: Vec<f64> = curves.iter().map(|c| c[k]).collect();
            v.sort_by(f64::total_cmp);
            v[2]
        })
        .collect();
    for w in median.windows(2) {
        assert!(w[1] >= w[0], "median curve not increasing: {median:?}");
    }
    assert!(median[steps] > 2.0 * median[0], "{median:?}");
}

#[test]
fn evaluation_is_worker_independent_and_bounded() {
    let env = EnvConfig::default();
    let eval = trainer::EvalConfig {
        num_states: 32,
        rollouts_per_state: 4,
        seed: 1,
    };
    let params = PolicyParams::zeros(&env);
    let a = trainer::evaluate(&params, &env, &eval, 1).unwrap();
    let b = trainer::evaluate(&params, &env, &eval, 3).unwrap();
    assert_eq!(a, b);
    assert!(a.metric_mean.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a.diversity.groups.len(), 32);
}

#[test]
fn config_validation_names_fields() {
    let bad = TrainConfig {
        group_size: 1,
        ..Default::default()
    };
    assert!(bad
        .validate()
        .unwrap_err()
        .to_string()
        .contains("train.group_size"));
}
