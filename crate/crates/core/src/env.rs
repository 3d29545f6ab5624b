//! Synthetic degradation environment.
//!
//! A state carries a vector of residual degradation intensities `d` (the clean
//! reference is `d = 0`) and a vector of appearance accumulators `p`. Tools are
//! affine maps with clamping:
//!
//! ```text
//! d' = clamp(A d + b, 0, clip_max)
//! p' = C p + e
//! ```
//!
//! Off-diagonal entries of `A` couple degradations, so the order in which
//! tasks run changes the outcome. Fidelity metrics read `d` only; perceptual
//! metrics also reward `p`, which some tools inflate while leaving artifacts
//! in `d`. That gives the metric suite a built-in conflict.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::Path;
use thiserror::Error;

use crate::rng::{self, domain};

pub type TaskId = usize;
pub type ToolId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("horizon exceeded: state is already at step {step} of {max_horizon}")]
    HorizonExceeded { step: usize, max_horizon: usize },
    #[error("unknown tool id {0}")]
    UnknownTool(ToolId),
    #[error("invalid config at `{path}`: {reason}")]
    InvalidConfig { path: String, reason: String },
    #[error("cannot read config {path}: {reason}")]
    Io { path: String, reason: String },
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> EnvError {
    EnvError::InvalidConfig {
        path: path.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    /// Degradation component this task is meant to remove.
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub task: TaskId,
    /// Degradation transfer matrix `A` (row-major, D x D).
    pub transfer: Vec<Vec<f64>>,
    /// Residual floor `b`.
    pub residual: Vec<f64>,
    /// Appearance transfer matrix `C`.
    pub appearance_transfer: Vec<Vec<f64>>,
    /// Appearance shift `e`.
    pub appearance_shift: Vec<f64>,
    /// Simulated execution latency in milliseconds.
    pub exec_cost_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Fidelity,
    Perceptual,
}

/// Metric formulas. All are higher-better and land in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum MetricFormula {
    /// `exp(-scale * ||d||_2)`
    ExpNegL2 { scale: f64 },
    /// `1 / (1 + scale * ||d||_1)`
    InvOnePlusL1 { scale: f64 },
    /// `1 - min(1, max_i d_i)`
    OneMinusMax,
    /// `sigmoid(bias + w_d . d + w_p . p)`
    Logistic {
        bias: f64,
        degradation: Vec<f64>,
        appearance: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDef {
    pub name: String,
    pub kind: MetricKind,
    pub formula: MetricFormula,
}

impl MetricDef {
    pub fn evaluate(&self, state: &EnvState) -> f64 {
        let v = match &self.formula {
            MetricFormula::ExpNegL2 { scale } => {
                let l2 = state.d.iter().map(|x| x * x).sum::<f64>().sqrt();
                (-scale * l2).exp()
            }
            MetricFormula::InvOnePlusL1 { scale } => {
                let l1: f64 = state.d.iter().map(|x| x.abs()).sum();
                1.0 / (1.0 + scale * l1)
            }
            MetricFormula::OneMinusMax => {
                let m = state.d.iter().copied().fold(0.0_f64, f64::max);
                1.0 - m.min(1.0)
            }
            MetricFormula::Logistic {
                bias,
                degradation,
                appearance,
            } => {
                let z = bias + dot(degradation, &state.d) + dot(appearance, &state.p);
                1.0 / (1.0 + (-z).exp())
            }
        };
        v.clamp(0.0, 1.0)
    }
}

/// How initial states are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    /// Upper bound on the number of simultaneously active degradations.
    pub max_active: usize,
    pub intensity_min: f64,
    pub intensity_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub num_degradations: usize,
    pub degradation_names: Vec<String>,
    pub max_horizon: usize,
    pub clip_max: f64,
    pub init: InitSpec,
    pub tasks: Vec<TaskSpec>,
    pub tools: Vec<ToolSpec>,
    pub metrics: Vec<MetricDef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub d: Vec<f64>,
    pub p: Vec<f64>,
    pub step: usize,
}

impl EnvState {
    /// The clean reference: no residual degradation, neutral appearance.
    pub fn clean(num_degradations: usize) -> Self {
        Self {
            d: vec![0.0; num_degradations],
            p: vec![0.0; num_degradations],
            step: 0,
        }
    }
}

pub type MetricVector = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Tool { task: TaskId, tool: ToolId },
    Terminate,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Tool { task, tool } => write!(f, "({task},{tool})"),
            Action::Terminate => write!(f, "TERMINATE"),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

impl ToolSpec {
    /// One tool application. Pure; `state` is left untouched.
    pub fn apply(
        &self,
        state: &EnvState,
        clip_max: f64,
        max_horizon: usize,
    ) -> Result<EnvState, EnvError> {
        if state.step >= max_horizon {
            return Err(EnvError::HorizonExceeded {
                step: state.step,
                max_horizon,
            });
        }
        let d = mat_vec(&self.transfer, &state.d)
            .into_iter()
            .zip(&self.residual)
            .map(|(x, b)| (x + b).clamp(0.0, clip_max))
            .collect();
        let p = mat_vec(&self.appearance_transfer, &state.p)
            .into_iter()
            .zip(&self.appearance_shift)
            .map(|(x, e)| x + e)
            .collect();
        Ok(EnvState {
            d,
            p,
            step: state.step + 1,
        })
    }
}

impl EnvConfig {
    pub fn num_metrics(&self) -> usize {
        self.metrics.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_tools(&self) -> usize {
        self.tools.len()
    }

    pub fn tools_for_task(&self, task: TaskId) -> impl Iterator<Item = ToolId> + '_ {
        self.tools
            .iter()
            .enumerate()
            .filter(move |(_, t)| t.task == task)
            .map(|(i, _)| i)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let dim = self.num_degradations;
        if dim == 0 {
            return Err(invalid("num_degradations", "must be positive"));
        }
        if self.degradation_names.len() != dim {
            return Err(invalid(
                "degradation_names",
                format!("expected {dim} names, got {}", self.degradation_names.len()),
            ));
        }
        if self.max_horizon == 0 {
            return Err(invalid("max_horizon", "must be positive"));
        }
        if !(self.clip_max.is_finite() && self.clip_max > 0.0) {
            return Err(invalid("clip_max", "must be a positive finite number"));
        }
        let init = &self.init;
        if init.max_active == 0 || init.max_active > dim {
            return Err(invalid("init.max_active", format!("must be in 1..={dim}")));
        }
        if !(init.intensity_min > 0.0
            && init.intensity_min <= init.intensity_max
            && init.intensity_max <= self.clip_max)
        {
            return Err(invalid(
                "init.intensity_min",
                "need 0 < intensity_min <= intensity_max <= clip_max",
            ));
        }
        if self.tasks.is_empty() {
            return Err(invalid("tasks", "at least one task required"));
        }
        for (i, task) in self.tasks.iter().enumerate() {
            if task.target >= dim {
                return Err(invalid(format!("tasks[{i}].target"), "out of range"));
            }
            if self.tools_for_task(i).next().is_none() {
                return Err(invalid(format!("tasks[{i}]"), "task has no tools"));
            }
        }
        let check_matrix = |path: String, m: &[Vec<f64>]| -> Result<(), EnvError> {
            if m.len() != dim || m.iter().any(|row| row.len() != dim) {
                return Err(invalid(path, format!("expected a {dim}x{dim} matrix")));
            }
            if m.iter().flatten().any(|x| !x.is_finite()) {
                return Err(invalid(path, "entries must be finite"));
            }
            Ok(())
        };
        let check_vector = |path: String, v: &[f64]| -> Result<(), EnvError> {
            if v.len() != dim {
                return Err(invalid(path, format!("expected length {dim}")));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(invalid(path, "entries must be finite"));
            }
            Ok(())
        };
        for (i, tool) in self.tools.iter().enumerate() {
            let at = |f: &str| format!("tools[{i}].{f}");
            if tool.task >= self.tasks.len() {
                return Err(invalid(at("task"), "references a missing task"));
            }
            check_matrix(at("transfer"), &tool.transfer)?;
            check_matrix(at("appearance_transfer"), &tool.appearance_transfer)?;
            check_vector(at("residual"), &tool.residual)?;
            check_vector(at("appearance_shift"), &tool.appearance_shift)?;
            if !(tool.exec_cost_ms.is_finite() && tool.exec_cost_ms >= 0.0) {
                return Err(invalid(at("exec_cost_ms"), "must be non-negative"));
            }
            // The targeted component may never grow, for any non-negative d:
            // 0 <= A[t][t] <= 1, no positive inflow, no positive floor.
            let t = self.tasks[tool.task].target;
            let row = &tool.transfer[t];
            let inflow = row.iter().enumerate().any(|(j, &a)| j != t && a > 0.0);
            if !(0.0..=1.0).contains(&row[t]) || inflow || tool.residual[t] > 0.0 {
                return Err(invalid(
                    at("transfer"),
                    "tool may increase its own task's targeted degradation",
                ));
            }
        }
        if self.metrics.len() < 2 {
            return Err(invalid("metrics", "need at least two metrics"));
        }
        let has = |k: MetricKind| self.metrics.iter().any(|m| m.kind == k);
        if !has(MetricKind::Fidelity) || !has(MetricKind::Perceptual) {
            return Err(invalid(
                "metrics",
                "need at least one fidelity and one perceptual metric",
            ));
        }
        for (i, m) in self.metrics.iter().enumerate() {
            match &m.formula {
                MetricFormula::ExpNegL2 { scale } | MetricFormula::InvOnePlusL1 { scale } => {
                    if !(scale.is_finite() && *scale >= 0.0) {
                        return Err(invalid(format!("metrics[{i}].scale"), "must be >= 0"));
                    }
                }
                MetricFormula::OneMinusMax => {}
                MetricFormula::Logistic {
                    bias,
                    degradation,
                    appearance,
                } => {
                    if !bias.is_finite() {
                        return Err(invalid(format!("metrics[{i}].bias"), "must be finite"));
                    }
                    check_vector(format!("metrics[{i}].degradation"), degradation)?;
                    check_vector(format!("metrics[{i}].appearance"), appearance)?;
                    if m.kind == MetricKind::Fidelity && appearance.iter().any(|&w| w != 0.0) {
                        return Err(invalid(
                            format!("metrics[{i}].appearance"),
                            "fidelity metrics must depend on degradation only",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Draws an initial degraded state: between 1 and `init.max_active`
    /// components are made strictly positive.
    pub fn init_state(&self, seed: u64) -> EnvState {
        let mut rng = rng::stream(seed, &[domain::INIT_STATE]);
        self.sample_state(&mut rng)
    }

    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        let dim = self.num_degradations;
        let active = rng.gen_range(1..=self.init.max_active);
        let chosen = rand::seq::index::sample(rng, dim, active);
        let mut state = EnvState::clean(dim);
        for i in chosen.iter() {
            state.d[i] = rng.gen_range(self.init.intensity_min..=self.init.intensity_max);
        }
        state
    }

    pub fn apply_tool(&self, state: &EnvState, tool: ToolId) -> Result<EnvState, EnvError> {
        let spec = self.tools.get(tool).ok_or(EnvError::UnknownTool(tool))?;
        spec.apply(state, self.clip_max, self.max_horizon)
    }

    pub fn measure(&self, state: &EnvState) -> MetricVector {
        self.metrics.iter().map(|m| m.evaluate(state)).collect()
    }

    pub fn metric_indices(&self, kind: MetricKind) -> Vec<usize> {
        self.metrics
            .iter()
            .enumerate()
            .filter(|(_, m)| m.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    /// Every (task, tool) pair in tool order, then `Terminate`. At the horizon
    /// only `Terminate` remains.
    pub fn valid_actions(&self, state: &EnvState) -> Vec<Action> {
        if state.step >= self.max_horizon {
            return vec![Action::Terminate];
        }
        self.tools
            .iter()
            .enumerate()
            .map(|(tool, spec)| Action::Tool {
                task: spec.task,
                tool,
            })
            .chain(std::iter::once(Action::Terminate))
            .collect()
    }

    /// Stable index of an action in `0..=num_tools`; `Terminate` is last.
    pub fn action_index(&self, action: Action) -> usize {
        match action {
            Action::Tool { tool, .. } => tool,
            Action::Terminate => self.tools.len(),
        }
    }

    pub fn action_at(&self, index: usize) -> Action {
        if index == self.tools.len() {
            Action::Terminate
        } else {
            Action::Tool {
                task: self.tools[index].task,
                tool: index,
            }
        }
    }

    pub fn num_actions(&self) -> usize {
        self.tools.len() + 1
    }

    /// Hex SHA-256 of the canonical JSON encoding; ties checkpoints and demo
    /// files to the environment they were produced against.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }

    pub fn from_toml(text: &str) -> Result<Self, EnvError> {
        let cfg: EnvConfig = toml::from_str(text).map_err(|e| invalid("<toml>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path).map_err(|e| EnvError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text)
    }
}

pub const DEGRADATIONS: [&str; 6] = [
    "noise",
    "motion_blur",
    "defocus_blur",
    "haze",
    "darkness",
    "low_resolution",
];

const TASKS: [&str; 6] = [
    "denoise",
    "motion_deblur",
    "defocus_deblur",
    "dehaze",
    "low_light",
    "super_resolution",
];

const NOISE: usize = 0;
const MOTION: usize = 1;
const DEFOCUS: usize = 2;
const HAZE: usize = 3;
const DARK: usize = 4;
const LOWRES: usize = 5;

/// Tool flavours offered for every task.
#[derive(Clone, Copy)]
enum Flavour {
    /// Removes its target, leaves a faint residue elsewhere.
    Faithful,
    /// Removes its target but amplifies other components harder.
    Aggressive,
    /// Half-restores its target and hallucinates appearance; leaves artifacts.
    Generative,
}

fn identity(dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..dim)
        .map(|i| (0..dim).map(|j| if i == j { scale } else { 0.0 }).collect())
        .collect()
}

fn default_tool(task: usize, flavour: Flavour) -> ToolSpec {
    let dim = DEGRADATIONS.len();
    let mut a = identity(dim, 1.0);
    let (keep, coupling, residue, suffix, cost) = match flavour {
        Flavour::Faithful => (0.0, 1.0, 0.01, "faithful", 40.0),
        Flavour::Aggressive => (0.0, 2.0, 0.03, "aggressive", 90.0),
        Flavour::Generative => (0.5, 1.0, 0.04, "generative", 120.0),
    };
    a[task][task] = keep;
    // Side effects amplify whatever is left of other components, so the
    // order in which tasks run matters.
    let mut amplify = |k: usize, gain: f64| a[k][k] = 1.0 + gain * coupling;
    match task {
        NOISE => amplify(DEFOCUS, 0.2),
        MOTION | DEFOCUS => amplify(NOISE, 0.3),
        HAZE => amplify(NOISE, 0.2),
        DARK => amplify(NOISE, 0.5),
        LOWRES => {
            amplify(MOTION, 0.3);
            amplify(DEFOCUS, 0.3);
            amplify(NOISE, 0.2);
        }
        _ => unreachable!(),
    }
    let b = (0..dim)
        .map(|k| if k == task { 0.0 } else { residue })
        .collect();
    let (c, e) = match flavour {
        Flavour::Generative => {
            let mut e = vec![0.0; dim];
            e[task] = 0.6;
            (identity(dim, 0.5), e)
        }
        _ => (identity(dim, 0.9), vec![0.0; dim]),
    };
    ToolSpec {
        name: format!("{}_{}", TASKS[task], suffix),
        task,
        transfer: a,
        residual: b,
        appearance_transfer: c,
        appearance_shift: e,
        exec_cost_ms: cost,
    }
}

fn default_metrics() -> Vec<MetricDef> {
    let perceptual = |name: &str, bias: f64, degradation: [f64; 6], gain: f64| MetricDef {
        name: name.to_string(),
        kind: MetricKind::Perceptual,
        formula: MetricFormula::Logistic {
            bias,
            degradation: degradation.to_vec(),
            appearance: vec![gain; 6],
        },
    };
    vec![
        MetricDef {
            name: "psnr_like".into(),
            kind: MetricKind::Fidelity,
            formula: MetricFormula::ExpNegL2 { scale: 1.0 },
        },
        MetricDef {
            name: "ssim_like".into(),
            kind: MetricKind::Fidelity,
            formula: MetricFormula::InvOnePlusL1 { scale: 1.0 },
        },
        MetricDef {
            name: "lpips_like".into(),
            kind: MetricKind::Fidelity,
            formula: MetricFormula::OneMinusMax,
        },
        perceptual(
            "maniqa_like",
            1.2,
            [-1.0, -1.2, -1.2, -0.6, -0.6, -0.9],
            0.9,
        ),
        perceptual(
            "clipiqa_like",
            1.0,
            [-0.8, -0.8, -0.8, -1.0, -1.0, -0.6],
            1.1,
        ),
        perceptual("musiq_like", 1.4, [-1.2, -1.0, -1.0, -0.5, -0.5, -1.2], 1.0),
    ]
}

impl Default for EnvConfig {
    fn default() -> Self {
        let dim = DEGRADATIONS.len();
        let tasks = TASKS
            .iter()
            .enumerate()
            .map(|(i, name)| TaskSpec {
                name: name.to_string(),
                target: i,
            })
            .collect();
        let tools = (0..dim)
            .flat_map(|t| {
                [Flavour::Faithful, Flavour::Aggressive, Flavour::Generative]
                    .into_iter()
                    .map(move |f| default_tool(t, f))
            })
            .collect();
        Self {
            num_degradations: dim,
            degradation_names: DEGRADATIONS.iter().map(|s| s.to_string()).collect(),
            max_horizon: 8,
            clip_max: 2.0,
            init: InitSpec {
                max_active: 3,
                intensity_min: 0.4,
                intensity_max: 1.2,
            },
            tasks,
            tools,
            metrics: default_metrics(),
        }
    }
}
