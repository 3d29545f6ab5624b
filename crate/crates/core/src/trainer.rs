//! Group-rollout policy-gradient training and rollout diversity analytics.
//!
//! Each step samples `batch_size` initial states, draws `group_size` rollouts
//! from each, scores them by their terminal metric vectors, turns each group
//! into per-rollout advantages through the configured reward mode and takes
//! one ascent step on the advantage-weighted sum of log-prob gradients.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use thiserror::Error;

use crate::demo::{mean_tool_entropy, Trajectory};
use crate::env::{EnvConfig, EnvError, EnvState, TaskId, ToolId};
use crate::mar::{group_advantages, MarConfig, MarError, MarState, RewardGroup, RewardMode};
use crate::policy::{self, accumulate_trajectory_grad, trajectory_decisions, PolicyParams};
use crate::pool::{McPool, PoolError};
use crate::rng::{self, domain};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config at `{path}`: {reason}")]
    InvalidConfig { path: String, reason: String },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Mar(#[from] MarError),
    #[error("i/o error on {path}: {reason}")]
    Io { path: String, reason: String },
}

/// When the adaptive weights are refreshed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarUpdate {
    /// Once per step from the batch-mean rewards.
    Batch,
    /// After every rollout group, in group order.
    Group,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub group_size: usize,
    pub max_parallel_rollouts: usize,
    pub steps: usize,
    pub lr: f64,
    pub reward_mode: RewardMode,
    pub mar: MarConfig,
    pub mar_update: MarUpdate,
    /// Worker threads for rollouts; results do not depend on this.
    pub workers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            group_size: 8,
            max_parallel_rollouts: 128,
            steps: 60,
            lr: 2.0,
            reward_mode: RewardMode::Mar,
            mar: MarConfig::default(),
            mar_update: MarUpdate::Batch,
            workers: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |path: &str, reason: &str| TrainError::InvalidConfig {
            path: format!("train.{path}"),
            reason: reason.into(),
        };
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        if self.group_size < 2 {
            return Err(bad("group_size", "must be at least 2"));
        }
        if self.max_parallel_rollouts == 0 {
            return Err(bad("max_parallel_rollouts", "must be at least 1"));
        }
        if self.workers == 0 {
            return Err(bad("workers", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(bad("lr", "must be non-negative"));
        }
        if !(self.mar.epsilon.is_finite() && self.mar.epsilon >= 0.0) {
            return Err(bad("mar.epsilon", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.mar.beta) {
            return Err(bad("mar.beta", "must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Counts for one rollout group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDiversity {
    pub size: usize,
    pub distinct: usize,
    /// Distinct trajectories sharing their step multiset with another
    /// distinct trajectory of the group.
    pub order_diverse: usize,
    /// Distinct trajectories not counted as order-diverse that share their
    /// task sequence with another distinct trajectory.
    pub tool_diverse: usize,
    /// Rollouts whose trajectory occurs at least twice in the group.
    pub identical: usize,
    /// Size of the most frequent trajectory's class.
    pub modal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub groups: Vec<GroupDiversity>,
    pub distinct_fraction: f64,
    pub order_fraction: f64,
    pub tool_fraction: f64,
    pub identical_fraction: f64,
    pub modal_share: f64,
    /// Per-task tool entropy in nats; `None` for tasks never selected.
    pub task_tool_entropy: Vec<Option<f64>>,
    pub mean_tool_entropy: f64,
}

impl DiversityReport {
    /// More than half the rollouts of an average group are repeats.
    pub fn majority_identical(&self) -> bool {
        self.identical_fraction > 0.5
    }
}

type Steps = [(TaskId, ToolId)];

fn sorted_steps(steps: &Steps) -> Vec<(TaskId, ToolId)> {
    let mut v = steps.to_vec();
    v.sort_unstable();
    v
}

pub fn group_diversity(group: &[&Steps]) -> GroupDiversity {
    let mut classes: Vec<(&Steps, usize)> = Vec::new();
    for &t in group {
        match classes.iter_mut().find(|(s, _)| *s == t) {
            Some((_, c)) => *c += 1,
            None => classes.push((t, 1)),
        }
    }
    let multisets: Vec<_> = classes.iter().map(|(s, _)| sorted_steps(s)).collect();
    let tasks: Vec<Vec<TaskId>> = classes
        .iter()
        .map(|(s, _)| s.iter().map(|&(t, _)| t).collect())
        .collect();
    let n = classes.len();
    let mut order_diverse = 0;
    let mut tool_diverse = 0;
    for i in 0..n {
        let others = (0..n).filter(|&j| j != i);
        if others.clone().any(|j| multisets[j] == multisets[i]) {
            order_diverse += 1;
        } else if others.clone().any(|j| tasks[j] == tasks[i]) {
            tool_diverse += 1;
        }
    }
    GroupDiversity {
        size: group.len(),
        distinct: n,
        order_diverse,
        tool_diverse,
        identical: classes
            .iter()
            .filter(|(_, c)| *c >= 2)
            .map(|(_, c)| c)
            .sum(),
        modal: classes.iter().map(|(_, c)| *c).max().unwrap_or(0),
    }
}

/// Diversity over rollout groups; every step of every rollout also feeds
/// the per-task tool-selection entropy.
pub fn diversity_stats(config: &EnvConfig, groups: &[Vec<&Steps>]) -> DiversityReport {
    let mut counts = vec![vec![0usize; config.num_tools()]; config.num_tasks()];
    for group in groups {
        for steps in group {
            for &(t, m) in steps.iter() {
                counts[t][m] += 1;
            }
        }
    }
    let per_group: Vec<GroupDiversity> = groups
        .iter()
        .filter(|g| !g.is_empty())
        .map(|g| group_diversity(g))
        .collect();
    let mean = |f: &dyn Fn(&GroupDiversity) -> usize| {
        if per_group.is_empty() {
            0.0
        } else {
            per_group
                .iter()
                .map(|g| f(g) as f64 / g.size as f64)
                .sum::<f64>()
                / per_group.len() as f64
        }
    };
    let task_tool_entropy = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| mean_tool_entropy(std::slice::from_ref(row)))
        })
        .collect();
    DiversityReport {
        distinct_fraction: mean(&|g| g.distinct),
        order_fraction: mean(&|g| g.order_diverse),
        tool_fraction: mean(&|g| g.tool_diverse),
        identical_fraction: mean(&|g| g.identical),
        modal_share: mean(&|g| g.modal),
        mean_tool_entropy: mean_tool_entropy(&counts),
        task_tool_entropy,
        groups: per_group,
    }
}

/// Rollout groups for a batch, laid out `[group][rollout]`.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub initial: Vec<EnvState>,
    pub groups: Vec<Vec<Trajectory>>,
    pub max_in_flight: usize,
}

impl RolloutBatch {
    pub fn diversity(&self, config: &EnvConfig) -> DiversityReport {
        let groups: Vec<Vec<&Steps>> = self
            .groups
            .iter()
            .map(|g| g.iter().map(|t| t.steps.as_slice()).collect())
            .collect();
        diversity_stats(config, &groups)
    }
}

/// Runs `g` rollouts per initial state on up to `min(workers, cap)` threads.
/// Rollout `(i, j)` uses the stream `(seed, rollout_domain, key.., i, j)`, so
/// the result is independent of scheduling.
#[allow(clippy::too_many_arguments)]
pub fn sample_groups(
    params: &PolicyParams,
    config: &EnvConfig,
    initial: Vec<EnvState>,
    group_size: usize,
    stream_key: &[u64],
    seed: u64,
    workers: usize,
    max_parallel: usize,
    pool: Option<&McPool>,
) -> Result<RolloutBatch, TrainError> {
    let total = initial.len() * group_size;
    let slots: Vec<Mutex<Option<Trajectory>>> = (0..total).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let in_flight = AtomicUsize::new(0);
    let max_in_flight = AtomicUsize::new(0);
    let first_error: Mutex<Option<TrainError>> = Mutex::new(None);
    let run_one = |idx: usize| -> Result<Trajectory, TrainError> {
        let (i, j) = (idx / group_size, idx % group_size);
        let mut key = stream_key.to_vec();
        key.extend([i as u64, j as u64]);
        let mut rng = rng::stream(seed, &key);
        match pool {
            Some(p) => Ok(policy::rollout(
                params,
                config,
                &initial[i],
                &mut rng,
                &p.session(rng::mix(seed, &key)),
            )?),
            None => Ok(policy::rollout(
                params,
                config,
                &initial[i],
                &mut rng,
                config,
            )?),
        }
    };
    let worker = || loop {
        if first_error
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .is_some()
        {
            return;
        }
        let idx = next.fetch_add(1, Ordering::SeqCst);
        if idx >= total {
            return;
        }
        let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        max_in_flight.fetch_max(now, Ordering::SeqCst);
        let out = run_one(idx);
        in_flight.fetch_sub(1, Ordering::SeqCst);
        match out {
            Ok(t) => *slots[idx].lock().unwrap_or_else(|e| e.into_inner()) = Some(t),
            Err(e) => {
                first_error
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .get_or_insert(e);
                return;
            }
        }
    };
    let threads = workers.min(max_parallel).min(total).max(1);
    if threads == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(worker);
            }
        });
    }
    if let Some(e) = first_error.into_inner().unwrap_or_else(|e| e.into_inner()) {
        return Err(e);
    }
    let mut flat = slots.into_iter().map(|s| {
        s.into_inner()
            .unwrap_or_else(|e| e.into_inner())
            .expect("every slot filled")
    });
    let groups = (0..initial.len())
        .map(|_| flat.by_ref().take(group_size).collect())
        .collect();
    Ok(RolloutBatch {
        initial,
        groups,
        max_in_flight: max_in_flight.into_inner(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    /// Batch-mean terminal reward per metric.
    pub reward_mean: Vec<f64>,
    /// Weights used for this step's advantages.
    pub weights: Vec<f64>,
    pub deviation: Vec<f64>,
    /// Moving average after this step's update.
    pub ema: Vec<f64>,
    /// Negated advantage-weighted log-likelihood of the batch.
    pub surrogate_loss: f64,
    pub grad_norm: f64,
    pub mean_length: f64,
    pub distinct_fraction: f64,
    pub identical_fraction: f64,
    pub mean_tool_entropy: f64,
}

pub const STEP_CSV_VERSION: u32 = 1;

impl StepReport {
    pub fn csv_header(metric_names: &[&str]) -> String {
        let mut cols = vec!["step".to_string()];
        for prefix in ["reward", "weight", "deviation", "ema"] {
            cols.extend(metric_names.iter().map(|m| format!("{prefix}_{m}")));
        }
        cols.extend(
            [
                "surrogate_loss",
                "grad_norm",
                "mean_length",
                "distinct_fraction",
                "identical_fraction",
                "mean_tool_entropy",
            ]
            .map(String::from),
        );
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.step.to_string()];
        for v in [&self.reward_mean, &self.weights, &self.deviation, &self.ema] {
            cols.extend(v.iter().map(|x| format!("{x:.9}")));
        }
        cols.extend([
            format!("{:.9}", self.surrogate_loss),
            format!("{:.9}", self.grad_norm),
            format!("{:.6}", self.mean_length),
            format!("{:.6}", self.distinct_fraction),
            format!("{:.6}", self.identical_fraction),
            format!("{:.9}", self.mean_tool_entropy),
        ]);
        cols.join(",")
    }
}

pub fn write_step_csv<W: Write>(
    config: &EnvConfig,
    reports: &[StepReport],
    mut out: W,
) -> std::io::Result<()> {
    let names: Vec<&str> = config.metrics.iter().map(|m| m.name.as_str()).collect();
    writeln!(out, "# toolrl-steps v{STEP_CSV_VERSION}")?;
    writeln!(out, "{}", StepReport::csv_header(&names))?;
    for r in reports {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

fn column_mean(rows: impl Iterator<Item = Vec<f64>>, width: usize) -> Vec<f64> {
    let mut sum = vec![0.0; width];
    let mut n = 0usize;
    for row in rows {
        for (s, v) in sum.iter_mut().zip(&row) {
            *s += v;
        }
        n += 1;
    }
    sum.iter().map(|s| s / n.max(1) as f64).collect()
}

/// Advantages per group under `mode`, refreshing `mar` per batch or per
/// group. Returns the weights that were applied to the first group.
pub fn batch_advantages(
    rewards: &[Vec<Vec<f64>>],
    mode: RewardMode,
    update: MarUpdate,
    mar: &mut MarState,
) -> Result<(Vec<Vec<f64>>, Vec<f64>), TrainError> {
    let width = mar.num_metrics();
    let mut out = Vec::with_capacity(rewards.len());
    let mut used = None;
    match update {
        MarUpdate::Batch => {
            *mar = mar.observe(&column_mean(rewards.iter().flatten().cloned(), width));
            for g in rewards {
                out.push(group_advantages(
                    &RewardGroup::new(g.clone())?,
                    mode,
                    &mar.weights,
                ));
            }
            used = Some(mar.weights.clone());
        }
        MarUpdate::Group => {
            for g in rewards {
                *mar = mar.observe(&column_mean(g.iter().cloned(), width));
                used.get_or_insert_with(|| mar.weights.clone());
                out.push(group_advantages(
                    &RewardGroup::new(g.clone())?,
                    mode,
                    &mar.weights,
                ));
            }
        }
    }
    Ok((out, used.unwrap_or_else(|| mar.weights.clone())))
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub params: PolicyParams,
    pub mar: MarState,
    pub report: StepReport,
    /// Peak concurrent rollouts; scheduling-dependent, so kept out of the report.
    pub max_in_flight: usize,
}

/// One training step with rewards computed by `reward` from each trajectory.
pub fn train_step_with_reward(
    params: &PolicyParams,
    mar: &MarState,
    step: usize,
    train: &TrainConfig,
    env: &EnvConfig,
    pool: Option<&McPool>,
    reward: &dyn Fn(&Trajectory) -> Vec<f64>,
) -> Result<StepOutput, TrainError> {
    let initial: Vec<EnvState> = (0..train.batch_size)
        .map(|i| {
            env.sample_state(&mut rng::stream(
                train.seed,
                &[domain::TRAIN_STATE, step as u64, i as u64],
            ))
        })
        .collect();
    let batch = sample_groups(
        params,
        env,
        initial,
        train.group_size,
        &[domain::TRAIN_ROLLOUT, step as u64],
        train.seed,
        train.workers,
        train.max_parallel_rollouts,
        pool,
    )?;
    let rewards: Vec<Vec<Vec<f64>>> = batch
        .groups
        .iter()
        .map(|g| g.iter().map(reward).collect())
        .collect();
    let mut mar = mar.clone();
    let (advantages, weights) =
        batch_advantages(&rewards, train.reward_mode, train.mar_update, &mut mar)?;

    let n = (train.batch_size * train.group_size) as f64;
    let mut grad = vec![0.0; params.theta.len()];
    let mut surrogate = 0.0;
    for (group, adv) in batch.groups.iter().zip(&advantages) {
        for (traj, &a) in group.iter().zip(adv) {
            if a == 0.0 {
                continue;
            }
            let decisions = trajectory_decisions(env, traj);
            accumulate_trajectory_grad(params, &decisions, a / n, &mut grad);
            surrogate -= a / n
                * decisions
                    .iter()
                    .map(|d| policy::decision_log_prob(params, d))
                    .sum::<f64>();
        }
    }
    let mut next = params.clone();
    next.add_scaled(&grad, train.lr);

    let diversity = batch.diversity(env);
    let report = StepReport {
        step,
        reward_mean: column_mean(rewards.iter().flatten().cloned(), mar.num_metrics()),
        weights,
        deviation: mar.deviation.clone(),
        ema: mar.ema.clone().unwrap_or_default(),
        surrogate_loss: surrogate,
        grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        mean_length: batch
            .groups
            .iter()
            .flatten()
            .map(|t| t.len() as f64)
            .sum::<f64>()
            / n,
        distinct_fraction: diversity.distinct_fraction,
        identical_fraction: diversity.identical_fraction,
        mean_tool_entropy: diversity.mean_tool_entropy,
    };
    Ok(StepOutput {
        params: next,
        mar,
        report,
        max_in_flight: batch.max_in_flight,
    })
}

/// One step with terminal metric vectors as rewards.
pub fn train_step(
    params: &PolicyParams,
    mar: &MarState,
    step: usize,
    train: &TrainConfig,
    env: &EnvConfig,
    pool: Option<&McPool>,
) -> Result<StepOutput, TrainError> {
    train_step_with_reward(params, mar, step, train, env, pool, &|t| {
        t.final_metrics.clone()
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub mar: MarState,
    pub reports: Vec<StepReport>,
    pub max_in_flight: usize,
}

pub fn train(
    params: &PolicyParams,
    train: &TrainConfig,
    env: &EnvConfig,
    pool: Option<&McPool>,
) -> Result<TrainOutcome, TrainError> {
    train.validate()?;
    let mut params = params.clone();
    let mut mar = MarState::new(env.num_metrics(), train.mar);
    let mut reports = Vec::with_capacity(train.steps);
    let mut max_in_flight = 0;
    for step in 0..train.steps {
        let out = train_step(&params, &mar, step, train, env, pool)?;
        max_in_flight = max_in_flight.max(out.max_in_flight);
        let r = out.report;
        log::debug!(
            "step {step}: reward {:?} weights {:?} distinct {:.3}",
            r.reward_mean,
            r.weights,
            r.distinct_fraction
        );
        params = out.params;
        mar = out.mar;
        reports.push(r);
    }
    Ok(TrainOutcome {
        params,
        mar,
        reports,
        max_in_flight,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub num_states: usize,
    pub rollouts_per_state: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_states: 256,
            rollouts_per_state: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric_names: Vec<String>,
    pub metric_mean: Vec<f64>,
    /// Minimum of `metric_mean`.
    pub worst_metric: f64,
    pub mean_length: f64,
    pub diversity: DiversityReport,
}

/// Held-out evaluation: states come from their own stream domain, so they
/// never coincide with training draws.
pub fn evaluate(
    params: &PolicyParams,
    env: &EnvConfig,
    eval: &EvalConfig,
    workers: usize,
) -> Result<EvalReport, TrainError> {
    let initial: Vec<EnvState> = (0..eval.num_states)
        .map(|i| env.sample_state(&mut rng::stream(eval.seed, &[domain::EVAL_STATE, i as u64])))
        .collect();
    let batch = sample_groups(
        params,
        env,
        initial,
        eval.rollouts_per_state,
        &[domain::EVAL_ROLLOUT],
        eval.seed,
        workers,
        usize::MAX,
        None,
    )?;
    let all: Vec<&Trajectory> = batch.groups.iter().flatten().collect();
    let metric_mean = column_mean(
        all.iter().map(|t| t.final_metrics.clone()),
        env.num_metrics(),
    );
    Ok(EvalReport {
        metric_names: env.metrics.iter().map(|m| m.name.clone()).collect(),
        worst_metric: metric_mean.iter().cloned().fold(f64::INFINITY, f64::min),
        mean_length: all.iter().map(|t| t.len() as f64).sum::<f64>() / all.len().max(1) as f64,
        diversity: batch.diversity(env),
        metric_mean,
    })
}
