//! Linear-softmax policy over (task, tool) actions.
//!
//! Scores are `theta[a] . x(s, h)` for every action `a`, masked to the valid
//! set and normalised with a softmax. The history `h` is summarised by how many
//! times each task has already run. For a chosen action `a` the score-function
//! gradient has the closed form
//!
//! ```text
//! d log pi(a | x) / d theta[b] = (1[a == b] - pi(b | x)) * x
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demo::{DemoSet, Trajectory};
use crate::env::{Action, EnvConfig, EnvError, EnvState, TaskId, ToolId};
use crate::rng::{self, domain};

pub const CHECKPOINT_FORMAT: &str = "toolrl-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("action {0} is not valid in this state")]
    InvalidAction(Action),
    #[error("demo set is empty")]
    EmptyDemos,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Summary of the interaction history: per-task execution counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct History {
    pub task_counts: Vec<usize>,
}

impl History {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            task_counts: vec![0; num_tasks],
        }
    }

    pub fn from_steps(num_tasks: usize, steps: &[(TaskId, ToolId)]) -> Self {
        let mut h = Self::new(num_tasks);
        for &(t, _) in steps {
            h.record(t);
        }
        h
    }

    pub fn record(&mut self, task: TaskId) {
        self.task_counts[task] += 1;
    }

    pub fn len(&self) -> usize {
        self.task_counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Layout: `[d (D), p (D), step / H, task_counts / H (T), 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSpec {
    pub num_degradations: usize,
    pub num_tasks: usize,
    pub max_horizon: usize,
}

impl FeatureSpec {
    pub fn new(config: &EnvConfig) -> Self {
        Self {
            num_degradations: config.num_degradations,
            num_tasks: config.num_tasks(),
            max_horizon: config.max_horizon,
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.num_degradations + self.num_tasks + 2
    }

    pub fn encode(&self, state: &EnvState, history: &History) -> Vec<f64> {
        let h = self.max_horizon as f64;
        let mut x = Vec::with_capacity(self.dim());
        x.extend_from_slice(&state.d);
        x.extend_from_slice(&state.p);
        x.push(state.step as f64 / h);
        x.extend(history.task_counts.iter().map(|&c| c as f64 / h));
        x.push(1.0);
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub num_actions: usize,
    pub feature_dim: usize,
    /// Row-major `num_actions x feature_dim`.
    pub theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(config: &EnvConfig) -> Self {
        let num_actions = config.num_actions();
        let feature_dim = FeatureSpec::new(config).dim();
        Self {
            num_actions,
            feature_dim,
            theta: vec![0.0; num_actions * feature_dim],
        }
    }

    pub fn row(&self, action: usize) -> &[f64] {
        &self.theta[action * self.feature_dim..(action + 1) * self.feature_dim]
    }

    pub fn row_mut(&mut self, action: usize) -> &mut [f64] {
        &mut self.theta[action * self.feature_dim..(action + 1) * self.feature_dim]
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|x| x.is_finite())
    }

    /// `self += scale * grad`.
    pub fn add_scaled(&mut self, grad: &[f64], scale: f64) {
        for (t, g) in self.theta.iter_mut().zip(grad) {
            *t += scale * g;
        }
    }

    pub fn to_checkpoint(&self, config: &EnvConfig) -> String {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            env_digest: config.digest(),
            num_actions: self.num_actions,
            feature_dim: self.feature_dim,
            theta: self.theta.clone(),
        };
        serde_json::to_string_pretty(&ck).expect("checkpoint serializes")
    }

    pub fn from_checkpoint(config: &EnvConfig, text: &str) -> Result<Self, PolicyError> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported format {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.env_digest != config.digest() {
            return Err(PolicyError::Checkpoint(
                "checkpoint was trained against a different env config".into(),
            ));
        }
        let zeros = Self::zeros(config);
        if ck.num_actions != zeros.num_actions
            || ck.feature_dim != zeros.feature_dim
            || ck.theta.len() != ck.num_actions * ck.feature_dim
        {
            return Err(PolicyError::Checkpoint("shape mismatch".into()));
        }
        let params = Self {
            num_actions: ck.num_actions,
            feature_dim: ck.feature_dim,
            theta: ck.theta,
        };
        if !params.is_finite() {
            return Err(PolicyError::Checkpoint("non-finite parameters".into()));
        }
        Ok(params)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    env_digest: String,
    num_actions: usize,
    feature_dim: usize,
    theta: Vec<f64>,
}

/// Validity mask indexed by action index.
pub fn valid_mask(config: &EnvConfig, state: &EnvState) -> Vec<bool> {
    let mut mask = vec![false; config.num_actions()];
    for a in config.valid_actions(state) {
        mask[config.action_index(a)] = true;
    }
    mask
}

/// Masked softmax of linear scores for a precomputed feature vector.
pub fn probabilities(params: &PolicyParams, x: &[f64], mask: &[bool]) -> Vec<f64> {
    let scores: Vec<f64> = (0..params.num_actions)
        .map(|a| {
            if mask[a] {
                params.row(a).iter().zip(x).map(|(w, v)| w * v).sum()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores
        .iter()
        .map(|&s| {
            if s == f64::NEG_INFINITY {
                0.0
            } else {
                (s - max).exp()
            }
        })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Probabilities indexed by action index; invalid actions get exactly 0.
pub fn action_distribution(
    params: &PolicyParams,
    config: &EnvConfig,
    state: &EnvState,
    history: &History,
) -> Vec<f64> {
    let x = FeatureSpec::new(config).encode(state, history);
    probabilities(params, &x, &valid_mask(config, state))
}

/// Adds `scale * d log pi(action | x) / d theta` into `grad`.
pub fn accumulate_log_prob_grad(
    params: &PolicyParams,
    x: &[f64],
    mask: &[bool],
    action: usize,
    scale: f64,
    grad: &mut [f64],
) {
    let probs = probabilities(params, x, mask);
    let dim = params.feature_dim;
    for (b, &pb) in probs.iter().enumerate() {
        let coef = scale * (f64::from(u8::from(b == action)) - pb);
        if coef == 0.0 {
            continue;
        }
        for (g, v) in grad[b * dim..(b + 1) * dim].iter_mut().zip(x) {
            *g += coef * v;
        }
    }
}

/// Exact gradient of `log pi(action | state, history)` with respect to theta,
/// flattened like [`PolicyParams::theta`].
pub fn log_prob_grad(
    params: &PolicyParams,
    config: &EnvConfig,
    state: &EnvState,
    history: &History,
    action: Action,
) -> Result<Vec<f64>, PolicyError> {
    let mask = valid_mask(config, state);
    let idx = config.action_index(action);
    if !mask.get(idx).copied().unwrap_or(false) {
        return Err(PolicyError::InvalidAction(action));
    }
    let x = FeatureSpec::new(config).encode(state, history);
    let mut grad = vec![0.0; params.theta.len()];
    accumulate_log_prob_grad(params, &x, &mask, idx, 1.0, &mut grad);
    Ok(grad)
}

pub fn log_prob(
    params: &PolicyParams,
    config: &EnvConfig,
    state: &EnvState,
    history: &History,
    action: Action,
) -> f64 {
    action_distribution(params, config, state, history)[config.action_index(action)].ln()
}

/// One policy decision with its features precomputed.
#[derive(Debug, Clone)]
pub struct Decision {
    pub features: Vec<f64>,
    pub mask: Vec<bool>,
    pub action: usize,
}

/// Every decision a trajectory encodes, including the closing `Terminate`.
pub fn trajectory_decisions(config: &EnvConfig, trajectory: &Trajectory) -> Vec<Decision> {
    let spec = FeatureSpec::new(config);
    let mut history = History::new(config.num_tasks());
    let mut out = Vec::with_capacity(trajectory.len() + 1);
    for (k, &(task, tool)) in trajectory.steps.iter().enumerate() {
        let state = &trajectory.states[k];
        out.push(Decision {
            features: spec.encode(state, &history),
            mask: valid_mask(config, state),
            action: config.action_index(Action::Tool { task, tool }),
        });
        history.record(task);
    }
    let last = trajectory.final_state();
    out.push(Decision {
        features: spec.encode(last, &history),
        mask: valid_mask(config, last),
        action: config.action_index(Action::Terminate),
    });
    out
}

pub fn decision_log_prob(params: &PolicyParams, d: &Decision) -> f64 {
    probabilities(params, &d.features, &d.mask)[d.action].ln()
}

/// Sum over a trajectory's decisions of `grad log pi`, scaled.
pub fn accumulate_trajectory_grad(
    params: &PolicyParams,
    decisions: &[Decision],
    scale: f64,
    grad: &mut [f64],
) {
    for d in decisions {
        accumulate_log_prob_grad(params, &d.features, &d.mask, d.action, scale, grad);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Mini-batch size; `None` means full-batch gradient ascent.
    pub minibatch: Option<usize>,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lr: 5.0,
            epochs: 1500,
            minibatch: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub params: PolicyParams,
    /// Mean demo log-likelihood before each epoch, plus the final value.
    pub log_likelihood: Vec<f64>,
}

impl SftOutcome {
    pub fn final_log_likelihood(&self) -> f64 {
        *self
            .log_likelihood
            .last()
            .expect("at least the initial value")
    }
}

fn mean_log_likelihood(params: &PolicyParams, decisions: &[Decision]) -> f64 {
    decisions
        .iter()
        .map(|d| decision_log_prob(params, d))
        .sum::<f64>()
        / decisions.len() as f64
}

/// Behaviour cloning: gradient ascent on the mean log-likelihood of every
/// demonstrated decision.
pub fn sft_update(
    params: &PolicyParams,
    config: &EnvConfig,
    demos: &DemoSet,
    cfg: &SftConfig,
) -> Result<SftOutcome, PolicyError> {
    if demos.is_empty() {
        return Err(PolicyError::EmptyDemos);
    }
    let decisions: Vec<Decision> = demos
        .items
        .iter()
        .flat_map(|item| trajectory_decisions(config, &item.trajectory))
        .collect();
    let mut params = params.clone();
    let mut log_likelihood = Vec::with_capacity(cfg.epochs + 1);
    let mut order: Vec<usize> = (0..decisions.len()).collect();
    let mut rng = rng::stream(cfg.seed, &[domain::SFT]);
    let batch = cfg
        .minibatch
        .unwrap_or(decisions.len())
        .clamp(1, decisions.len());
    for _ in 0..cfg.epochs {
        log_likelihood.push(mean_log_likelihood(&params, &decisions));
        if cfg.minibatch.is_some() {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        }
        for chunk in order.chunks(batch) {
            let mut grad = vec![0.0; params.theta.len()];
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let d = &decisions[i];
                accumulate_log_prob_grad(&params, &d.features, &d.mask, d.action, scale, &mut grad);
            }
            params.add_scaled(&grad, cfg.lr);
        }
    }
    log_likelihood.push(mean_log_likelihood(&params, &decisions));
    Ok(SftOutcome {
        params,
        log_likelihood,
    })
}

/// Anything that can run a tool on a state: the environment itself, or the
/// shared execution pool.
pub trait ToolExecutor: Sync {
    type Error: std::error::Error + Send + Sync + 'static;

    fn execute(&self, state: &EnvState, tool: ToolId) -> Result<EnvState, Self::Error>;
}

impl ToolExecutor for EnvConfig {
    type Error = EnvError;

    fn execute(&self, state: &EnvState, tool: ToolId) -> Result<EnvState, EnvError> {
        self.apply_tool(state, tool)
    }
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Samples actions until `Terminate` (or the horizon forces it).
pub fn rollout<R: Rng + ?Sized, E: ToolExecutor>(
    params: &PolicyParams,
    config: &EnvConfig,
    initial: &EnvState,
    rng: &mut R,
    executor: &E,
) -> Result<Trajectory, E::Error> {
    let spec = FeatureSpec::new(config);
    let mut history = History::new(config.num_tasks());
    let mut states = vec![initial.clone()];
    let mut steps = Vec::new();
    loop {
        let state = states.last().expect("non-empty");
        let mask = valid_mask(config, state);
        let probs = probabilities(params, &spec.encode(state, &history), &mask);
        match config.action_at(sample_index(&probs, rng)) {
            Action::Terminate => break,
            Action::Tool { task, tool } => {
                let next = executor.execute(state, tool)?;
                history.record(task);
                steps.push((task, tool));
                states.push(next);
            }
        }
    }
    let final_metrics = config.measure(states.last().expect("non-empty"));
    Ok(Trajectory {
        steps,
        states,
        final_metrics,
    })
}

/// [`rollout`] against the environment directly with a seeded stream.
pub fn rollout_seeded(
    params: &PolicyParams,
    config: &EnvConfig,
    initial: &EnvState,
    seed: u64,
) -> Trajectory {
    let mut rng = rng::stream(seed, &[domain::TRAIN_ROLLOUT]);
    rollout(params, config, initial, &mut rng, config).expect("direct execution below horizon")
}
