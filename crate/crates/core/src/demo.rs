//! Demonstration trajectories and exploration-driven perturbation (EDP).
//!
//! Oracle demonstrations come from an exhaustive greedy search: at every step
//! all tools are tried and the one with the best equal-weight metric mean is
//! kept. EDP then widens that data in two ways:
//!
//! - order perturbation: each item is selected independently with probability
//!   `alpha_t`; a copy with its steps shuffled is appended (multiset union);
//! - tool perturbation: every step's tool is redrawn uniformly over the task's
//!   tools with probability `alpha_m`, and kept otherwise. Over the data set the
//!   per-task tool law becomes `(1 - alpha_m) P(m|t) + alpha_m U(m|t)`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, Write};
use thiserror::Error;

use crate::env::{EnvConfig, EnvError, EnvState, MetricVector, TaskId, ToolId};
use crate::rng::{self, domain};

pub const DEMO_FORMAT: &str = "toolrl-demos";
pub const DEMO_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("demo set is empty")]
    Empty,
    #[error("task {task} has no registered tools")]
    EmptyToolSet { task: TaskId },
    #[error("tool {tool} does not serve task {task}")]
    ToolTaskMismatch { task: TaskId, tool: ToolId },
    #[error("alpha `{name}` = {value} is outside [0, 1]")]
    InvalidAlpha { name: &'static str, value: f64 },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("demo file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("demo file was produced for env {found}, expected {expected}")]
    EnvMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<(TaskId, ToolId)>,
    /// `steps.len() + 1` states, starting with the initial one.
    pub states: Vec<EnvState>,
    pub final_metrics: MetricVector,
}

impl Trajectory {
    /// Rebuilds states and final metrics by applying `steps` to `initial`.
    pub fn replay(
        config: &EnvConfig,
        initial: EnvState,
        steps: Vec<(TaskId, ToolId)>,
    ) -> Result<Self, DemoError> {
        let mut states = Vec::with_capacity(steps.len() + 1);
        states.push(initial);
        for &(task, tool) in &steps {
            let spec = config.tools.get(tool).ok_or(EnvError::UnknownTool(tool))?;
            if spec.task != task {
                return Err(DemoError::ToolTaskMismatch { task, tool });
            }
            let next = config.apply_tool(states.last().expect("non-empty"), tool)?;
            states.push(next);
        }
        let final_metrics = config.measure(states.last().expect("non-empty"));
        Ok(Self {
            steps,
            states,
            final_metrics,
        })
    }

    pub fn initial(&self) -> &EnvState {
        &self.states[0]
    }

    pub fn final_state(&self) -> &EnvState {
        self.states.last().expect("trajectory has an initial state")
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn task_sequence(&self) -> Vec<TaskId> {
        self.steps.iter().map(|&(t, _)| t).collect()
    }

    /// True when replaying the steps reproduces the stored states bitwise.
    pub fn is_replay_consistent(&self, config: &EnvConfig) -> bool {
        match Self::replay(config, self.initial().clone(), self.steps.clone()) {
            Ok(r) => r.states == self.states && r.final_metrics == self.final_metrics,
            Err(_) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub order_perturbed: bool,
    pub tool_perturbed: bool,
}

impl Provenance {
    pub const ORACLE: Provenance = Provenance {
        order_perturbed: false,
        tool_perturbed: false,
    };

    pub fn tag(&self) -> &'static str {
        match (self.order_perturbed, self.tool_perturbed) {
            (false, false) => "oracle",
            (true, false) => "order",
            (false, true) => "tool",
            (true, true) => "order+tool",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        let (order_perturbed, tool_perturbed) = match tag {
            "oracle" => (false, false),
            "order" => (true, false),
            "tool" => (false, true),
            "order+tool" => (true, true),
            _ => return None,
        };
        Some(Self {
            order_perturbed,
            tool_perturbed,
        })
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoItem {
    pub trajectory: Trajectory,
    pub provenance: Provenance,
}

impl DemoItem {
    /// Degraded input; the clean reference is [`EnvState::clean`].
    pub fn initial(&self) -> &EnvState {
        self.trajectory.initial()
    }

    pub fn reference(&self) -> EnvState {
        EnvState::clean(self.initial().d.len())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DemoSet {
    pub items: Vec<DemoItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdpConfig {
    /// Per-item probability of appending an order-shuffled copy.
    pub alpha_t: f64,
    /// Per-step probability of redrawing the tool uniformly.
    pub alpha_m: f64,
    pub seed: u64,
}

impl Default for EdpConfig {
    fn default() -> Self {
        Self {
            alpha_t: 0.3,
            alpha_m: 0.4,
            seed: 0,
        }
    }
}

impl EdpConfig {
    pub fn validate(&self) -> Result<(), DemoError> {
        for (name, value) in [("alpha_t", self.alpha_t), ("alpha_m", self.alpha_m)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(DemoError::InvalidAlpha { name, value });
            }
        }
        Ok(())
    }
}

fn metric_mean(m: &[f64]) -> f64 {
    m.iter().sum::<f64>() / m.len() as f64
}

/// Greedy search from one initial state.
pub fn greedy_trajectory(config: &EnvConfig, initial: EnvState) -> Trajectory {
    let mut state = initial.clone();
    let mut value = metric_mean(&config.measure(&state));
    let mut steps = Vec::new();
    while state.step < config.max_horizon {
        let mut best: Option<(f64, ToolId, EnvState)> = None;
        for tool in 0..config.num_tools() {
            let next = config
                .apply_tool(&state, tool)
                .expect("below horizon and tool exists");
            let v = metric_mean(&config.measure(&next));
            if best.as_ref().is_none_or(|(bv, _, _)| v > *bv) {
                best = Some((v, tool, next));
            }
        }
        match best {
            Some((v, tool, next)) if v > value => {
                steps.push((config.tools[tool].task, tool));
                state = next;
                value = v;
            }
            _ => break,
        }
    }
    Trajectory::replay(config, initial, steps).expect("greedy steps replay")
}

pub fn generate_oracle_demos(
    config: &EnvConfig,
    n: usize,
    seed: u64,
) -> Result<DemoSet, DemoError> {
    if n == 0 {
        return Err(DemoError::Empty);
    }
    let items = (0..n as u64)
        .map(|i| {
            let mut rng = rng::stream(seed, &[domain::ORACLE, i]);
            let initial = config.sample_state(&mut rng);
            DemoItem {
                trajectory: greedy_trajectory(config, initial),
                provenance: Provenance::ORACLE,
            }
        })
        .collect();
    Ok(DemoSet { items })
}

/// Appends order-shuffled copies of a Bernoulli(`alpha_t`) subset.
pub fn perturb_order(
    config: &EnvConfig,
    demos: &DemoSet,
    cfg: &EdpConfig,
) -> Result<DemoSet, DemoError> {
    cfg.validate()?;
    let mut items = demos.items.clone();
    for (i, item) in demos.items.iter().enumerate() {
        let mut rng = rng::stream(cfg.seed, &[domain::EDP_ORDER, i as u64]);
        if rng.gen::<f64>() >= cfg.alpha_t {
            continue;
        }
        let mut steps = item.trajectory.steps.clone();
        steps.shuffle(&mut rng);
        let trajectory = Trajectory::replay(config, item.initial().clone(), steps)?;
        items.push(DemoItem {
            trajectory,
            provenance: Provenance {
                order_perturbed: true,
                ..item.provenance
            },
        });
    }
    Ok(DemoSet { items })
}

/// Redraws each step's tool uniformly with probability `alpha_m`.
pub fn perturb_tools(
    config: &EnvConfig,
    demos: &DemoSet,
    cfg: &EdpConfig,
) -> Result<DemoSet, DemoError> {
    cfg.validate()?;
    let candidates: Vec<Vec<ToolId>> = (0..config.num_tasks())
        .map(|t| config.tools_for_task(t).collect())
        .collect();
    let mut items = Vec::with_capacity(demos.items.len());
    for (i, item) in demos.items.iter().enumerate() {
        let mut rng = rng::stream(cfg.seed, &[domain::EDP_TOOLS, i as u64]);
        let mut changed = false;
        let mut steps = Vec::with_capacity(item.trajectory.len());
        for &(task, tool) in &item.trajectory.steps {
            let pool = candidates
                .get(task)
                .filter(|c| !c.is_empty())
                .ok_or(DemoError::EmptyToolSet { task })?;
            let redraw = rng.gen::<f64>() < cfg.alpha_m;
            let new_tool = if redraw {
                *pool.choose(&mut rng).expect("non-empty")
            } else {
                tool
            };
            changed |= new_tool != tool;
            steps.push((task, new_tool));
        }
        let (trajectory, provenance) = if changed {
            let t = Trajectory::replay(config, item.initial().clone(), steps)?;
            let p = Provenance {
                tool_perturbed: true,
                ..item.provenance
            };
            (t, p)
        } else {
            (item.trajectory.clone(), item.provenance)
        };
        items.push(DemoItem {
            trajectory,
            provenance,
        });
    }
    Ok(DemoSet { items })
}

/// Tool perturbation applied to the order-perturbed union.
pub fn build_sft_set(
    config: &EnvConfig,
    demos: &DemoSet,
    cfg: &EdpConfig,
) -> Result<DemoSet, DemoError> {
    if demos.items.is_empty() {
        return Err(DemoError::Empty);
    }
    let ordered = perturb_order(config, demos, cfg)?;
    perturb_tools(config, &ordered, cfg)
}

/// `(1 - alpha) * base + alpha * uniform` over one task's tools.
pub fn mixture_probabilities(base: &[f64], alpha: f64) -> Vec<f64> {
    let u = 1.0 / base.len() as f64;
    base.iter()
        .map(|&p| (1.0 - alpha) * p + alpha * u)
        .collect()
}

/// Sampler for the perturbed per-task tool law.
#[derive(Debug, Clone)]
pub struct ToolMixture {
    pub tools: Vec<ToolId>,
    pub probs: Vec<f64>,
}

impl ToolMixture {
    /// `base` is indexed like `tools`; an all-zero base falls back to uniform.
    pub fn new(tools: Vec<ToolId>, base: &[f64], alpha: f64) -> Result<Self, DemoError> {
        if tools.is_empty() {
            return Err(DemoError::EmptyToolSet { task: usize::MAX });
        }
        let total: f64 = base.iter().sum();
        let base: Vec<f64> = if total > 0.0 {
            base.iter().map(|b| b / total).collect()
        } else {
            vec![1.0 / tools.len() as f64; tools.len()]
        };
        Ok(Self {
            probs: mixture_probabilities(&base, alpha),
            tools,
        })
    }

    pub fn for_task(
        config: &EnvConfig,
        demos: &DemoSet,
        task: TaskId,
        alpha: f64,
    ) -> Result<Self, DemoError> {
        let tools: Vec<ToolId> = config.tools_for_task(task).collect();
        if tools.is_empty() {
            return Err(DemoError::EmptyToolSet { task });
        }
        let counts = tool_counts(config, demos);
        let base: Vec<f64> = tools.iter().map(|&m| counts[task][m] as f64).collect();
        Self::new(tools, &base, alpha)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ToolId {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (tool, p) in self.tools.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return *tool;
            }
        }
        *self.tools.last().expect("non-empty")
    }
}

/// `counts[task][tool]` over every step of every item.
pub fn tool_counts(config: &EnvConfig, demos: &DemoSet) -> Vec<Vec<usize>> {
    let mut counts = vec![vec![0usize; config.num_tools()]; config.num_tasks()];
    for item in &demos.items {
        for &(t, m) in &item.trajectory.steps {
            counts[t][m] += 1;
        }
    }
    counts
}

/// Empirical `P(m|t)`; rows for unseen tasks are all zero.
pub fn empirical_tool_distribution(config: &EnvConfig, demos: &DemoSet) -> Vec<Vec<f64>> {
    tool_counts(config, demos)
        .into_iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&c| {
                    if total == 0 {
                        0.0
                    } else {
                        c as f64 / total as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// Mean Shannon entropy (nats) of the per-task tool distribution, over tasks
/// that were selected at least once.
pub fn mean_tool_entropy(counts: &[Vec<usize>]) -> f64 {
    let entropies: Vec<f64> = counts
        .iter()
        .filter_map(|row| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| {
                row.iter()
                    .filter(|&&c| c > 0)
                    .map(|&c| {
                        let p = c as f64 / total as f64;
                        p * (total as f64 / c as f64).ln()
                    })
                    .sum::<f64>()
            })
        })
        .collect();
    if entropies.is_empty() {
        0.0
    } else {
        entropies.iter().sum::<f64>() / entropies.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub items: usize,
    pub steps: usize,
    /// `length_histogram[k]` = number of trajectories with `k` steps.
    pub length_histogram: Vec<usize>,
    pub tool_frequencies: Vec<usize>,
    pub order_perturbed: usize,
    pub tool_perturbed: usize,
    pub mean_tool_entropy: f64,
}

impl DemoSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn summary(&self, config: &EnvConfig) -> DemoSummary {
        let mut length_histogram = vec![0; config.max_horizon + 1];
        let mut tool_frequencies = vec![0; config.num_tools()];
        let mut steps = 0;
        for item in &self.items {
            let len = item.trajectory.len();
            steps += len;
            length_histogram[len.min(config.max_horizon)] += 1;
            for &(_, m) in &item.trajectory.steps {
                tool_frequencies[m] += 1;
            }
        }
        DemoSummary {
            items: self.items.len(),
            steps,
            length_histogram,
            tool_frequencies,
            order_perturbed: self
                .items
                .iter()
                .filter(|i| i.provenance.order_perturbed)
                .count(),
            tool_perturbed: self
                .items
                .iter()
                .filter(|i| i.provenance.tool_perturbed)
                .count(),
            mean_tool_entropy: mean_tool_entropy(&tool_counts(config, self)),
        }
    }

    pub fn all_replay_consistent(&self, config: &EnvConfig) -> bool {
        self.items
            .iter()
            .all(|i| i.trajectory.is_replay_consistent(config))
    }

    /// Writes the line-delimited format: a header line, then one JSON record
    /// per item.
    pub fn write_jsonl<W: Write>(&self, config: &EnvConfig, mut out: W) -> Result<(), DemoError> {
        let header = DemoHeader {
            format: DEMO_FORMAT.to_string(),
            version: DEMO_FORMAT_VERSION,
            env_digest: config.digest(),
            items: self.items.len(),
        };
        serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        for item in &self.items {
            let record = DemoRecord {
                d: item.initial().d.clone(),
                p: item.initial().p.clone(),
                steps: item.trajectory.steps.clone(),
                provenance: item.provenance.tag().to_string(),
            };
            serde_json::to_writer(&mut out, &record).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a file written by [`DemoSet::write_jsonl`], replaying every
    /// trajectory against `config`.
    pub fn read_jsonl<R: BufRead>(config: &EnvConfig, input: R) -> Result<Self, DemoError> {
        let mut lines = input.lines().enumerate();
        let parse_err = |line: usize, reason: String| DemoError::Parse {
            line: line + 1,
            reason,
        };
        let (_, first) = lines.next().ok_or(DemoError::Parse {
            line: 1,
            reason: "missing header".into(),
        })?;
        let header: DemoHeader =
            serde_json::from_str(&first?).map_err(|e| parse_err(0, e.to_string()))?;
        if header.format != DEMO_FORMAT || header.version != DEMO_FORMAT_VERSION {
            return Err(parse_err(
                0,
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        let expected = config.digest();
        if header.env_digest != expected {
            return Err(DemoError::EnvMismatch {
                expected,
                found: header.env_digest,
            });
        }
        let mut items = Vec::with_capacity(header.items);
        for (n, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DemoRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(n, e.to_string()))?;
            let provenance = Provenance::from_tag(&rec.provenance)
                .ok_or_else(|| parse_err(n, format!("unknown provenance `{}`", rec.provenance)))?;
            if rec.d.len() != config.num_degradations || rec.p.len() != config.num_degradations {
                return Err(parse_err(n, "state dimension mismatch".into()));
            }
            let initial = EnvState {
                d: rec.d,
                p: rec.p,
                step: 0,
            };
            let trajectory = Trajectory::replay(config, initial, rec.steps)
                .map_err(|e| parse_err(n, e.to_string()))?;
            items.push(DemoItem {
                trajectory,
                provenance,
            });
        }
        if items.len() != header.items {
            return Err(parse_err(
                0,
                format!(
                    "header declares {} items, found {}",
                    header.items,
                    items.len()
                ),
            ));
        }
        Ok(Self { items })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DemoHeader {
    format: String,
    version: u32,
    env_digest: String,
    items: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct DemoRecord {
    d: Vec<f64>,
    p: Vec<f64>,
    steps: Vec<(TaskId, ToolId)>,
    provenance: String,
}
