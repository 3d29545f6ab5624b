//! Multi-dimensional adaptive reward.
//!
//! Per training step, with `r` the batch-mean reward of each metric and `ema`
//! its moving average from previous steps:
//!
//! ```text
//! dev    = 1 - clip((r - ema) / ema, -eps, eps)        // in [1 - eps, 1 + eps]
//! ema'   = (1 - beta) r + beta ema
//! w      = softmax(dev)
//! A[j,m] = (r[j,m] - mean_j r[.,m]) / std_j r[.,m]     // per metric, per group
//! A[j]   = sum_m w[m] A[j,m]
//! ```
//!
//! A metric falling behind its own history gets a larger deviation score and
//! therefore a larger share of the advantage.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Columns whose population std falls below this get zero advantage.
pub const DEGENERATE_STD: f64 = 1e-8;

/// Floor for the deviation denominator; metrics can average to exactly zero.
const EMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MarError {
    #[error("unknown reward mode `{0}`")]
    UnknownMode(String),
    #[error("a reward group needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("reward group is ragged: row {row} has {found} metrics, expected {expected}")]
    Ragged {
        row: usize,
        found: usize,
        expected: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarConfig {
    /// Clip bound on the relative deviation.
    pub epsilon: f64,
    /// EMA retention.
    pub beta: f64,
}

impl Default for MarConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            beta: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarState {
    pub config: MarConfig,
    /// Per-metric moving average; `None` until the first batch is observed.
    pub ema: Option<Vec<f64>>,
    /// Last deviation scores.
    pub deviation: Vec<f64>,
    /// Current metric weights (a probability vector).
    pub weights: Vec<f64>,
}

impl MarState {
    pub fn new(num_metrics: usize, config: MarConfig) -> Self {
        Self {
            config,
            ema: None,
            deviation: vec![1.0; num_metrics],
            weights: vec![1.0 / num_metrics as f64; num_metrics],
        }
    }

    pub fn num_metrics(&self) -> usize {
        self.weights.len()
    }

    /// One training step's reweighting: deviation against the pre-update EMA,
    /// softmax into weights, then the EMA update. The first observation seeds
    /// the EMA, which makes its deviation exactly 1 for every metric.
    pub fn observe(&self, batch_mean: &[f64]) -> MarState {
        let ema = self.ema.clone().unwrap_or_else(|| batch_mean.to_vec());
        let deviation = deviation_score(batch_mean, &ema, self.config.epsilon);
        let weighted = normalize_weights(&deviation, self);
        update_ema(batch_mean, &weighted)
    }
}

/// `1 - clip((r - ema) / ema, -eps, eps)` per metric.
pub fn deviation_score(batch_mean: &[f64], ema: &[f64], epsilon: f64) -> Vec<f64> {
    batch_mean
        .iter()
        .zip(ema)
        .map(|(&r, &e)| {
            let e = e.max(EMA_FLOOR);
            1.0 - ((r - e) / e).clamp(-epsilon, epsilon)
        })
        .collect()
}

/// `ema' = (1 - beta) r + beta ema`; an uninitialised EMA takes `r` directly.
pub fn update_ema(batch_mean: &[f64], state: &MarState) -> MarState {
    let beta = state.config.beta;
    let ema = match &state.ema {
        None => batch_mean.to_vec(),
        Some(prev) => batch_mean
            .iter()
            .zip(prev)
            .map(|(&r, &e)| (1.0 - beta) * r + beta * e)
            .collect(),
    };
    MarState {
        ema: Some(ema),
        ..state.clone()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Weights become `softmax(deviation)` (temperature 1).
pub fn normalize_weights(deviation: &[f64], state: &MarState) -> MarState {
    MarState {
        deviation: deviation.to_vec(),
        weights: softmax(deviation),
        ..state.clone()
    }
}

/// One sample's group of rollouts: `rewards[j][m]` is metric `m` of rollout `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardGroup {
    rewards: Vec<Vec<f64>>,
}

impl RewardGroup {
    pub fn new(rewards: Vec<Vec<f64>>) -> Result<Self, MarError> {
        if rewards.len() < 2 {
            return Err(MarError::GroupTooSmall(rewards.len()));
        }
        let expected = rewards[0].len();
        if let Some((row, r)) = rewards
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != expected)
        {
            return Err(MarError::Ragged {
                row,
                found: r.len(),
                expected,
            });
        }
        Ok(Self { rewards })
    }

    pub fn size(&self) -> usize {
        self.rewards.len()
    }

    pub fn num_metrics(&self) -> usize {
        self.rewards[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rewards
    }

    fn column(&self, m: usize) -> Vec<f64> {
        self.rewards.iter().map(|r| r[m]).collect()
    }
}

/// Population standardisation with the degenerate-group guard.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < DEGENERATE_STD {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Per-metric group advantages, `g x R`.
pub fn decoupled_advantages(group: &RewardGroup) -> Vec<Vec<f64>> {
    let cols: Vec<Vec<f64>> = (0..group.num_metrics())
        .map(|m| standardize(&group.column(m)))
        .collect();
    (0..group.size())
        .map(|j| cols.iter().map(|c| c[j]).collect())
        .collect()
}

/// Weighted row sums.
pub fn aggregate_advantages(per_metric: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    per_metric
        .iter()
        .map(|row| row.iter().zip(weights).map(|(a, w)| a * w).sum())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Standardise the plain sum of raw metrics.
    Vanilla,
    /// Standardise the adaptively weighted sum of raw metrics.
    NoDecouple,
    /// Decoupled per-metric advantages with fixed uniform weights.
    NoWeights,
    /// Decoupled advantages with adaptive weights.
    Mar,
}

impl RewardMode {
    pub const ALL: [RewardMode; 4] = [
        RewardMode::Vanilla,
        RewardMode::NoDecouple,
        RewardMode::NoWeights,
        RewardMode::Mar,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RewardMode::Vanilla => "vanilla",
            RewardMode::NoDecouple => "no_decouple",
            RewardMode::NoWeights => "no_weights",
            RewardMode::Mar => "mar",
        }
    }

    /// Whether this mode reads the adaptive weights.
    pub fn uses_adaptive_weights(&self) -> bool {
        matches!(self, RewardMode::NoDecouple | RewardMode::Mar)
    }
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RewardMode {
    type Err = MarError;

    fn from_str(s: &str) -> Result<Self, MarError> {
        RewardMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| MarError::UnknownMode(s.to_string()))
    }
}

/// Scalar advantage per rollout under `mode`. `weights` are the adaptive
/// weights from [`MarState`]; modes that do not use them ignore the argument.
pub fn group_advantages(group: &RewardGroup, mode: RewardMode, weights: &[f64]) -> Vec<f64> {
    let r = group.num_metrics();
    let uniform = vec![1.0 / r as f64; r];
    match mode {
        RewardMode::Vanilla => {
            let sums: Vec<f64> = group.rows().iter().map(|row| row.iter().sum()).collect();
            standardize(&sums)
        }
        RewardMode::NoDecouple => {
            let mixed: Vec<f64> = group
                .rows()
                .iter()
                .map(|row| row.iter().zip(weights).map(|(v, w)| v * w).sum())
                .collect();
            standardize(&mixed)
        }
        RewardMode::NoWeights => aggregate_advantages(&decoupled_advantages(group), &uniform),
        RewardMode::Mar => aggregate_advantages(&decoupled_advantages(group), weights),
    }
}

/// String-keyed entry point used by the CLI.
pub fn baseline_reward_modes(
    group: &RewardGroup,
    mode: &str,
    state: &MarState,
) -> Result<Vec<f64>, MarError> {
    let mode: RewardMode = mode.parse()?;
    Ok(group_advantages(group, mode, &state.weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zero_deviation_scores_one() {
        let d = deviation_score(&[0.3, 0.7], &[0.3, 0.7], 0.2);
        assert_eq!(d, vec![1.0, 1.0]);
    }

    #[test]
    fn doubled_reward_clips_to_lower_bound() {
        // (2e - e) / e = 1.0 -> clipped to 0.2 -> 0.8
        let d = deviation_score(&[0.8], &[0.4], 0.2);
        assert!(close(d[0], 0.8, 1e-15));
    }

    #[test]
    fn zero_reward_clips_to_upper_bound() {
        // (0 - e) / e = -1.0 -> clipped to -0.2 -> 1.2
        let d = deviation_score(&[0.0], &[0.4], 0.2);
        assert!(close(d[0], 1.2, 1e-15));
    }

    #[test]
    fn ema_fixed_point_and_no_retention() {
        let s = update_ema(&[0.5, 0.2], &MarState::new(2, MarConfig::default()));
        assert_eq!(s.ema.as_deref(), Some(&[0.5, 0.2][..]));
        let again = update_ema(&[0.5, 0.2], &s);
        assert_eq!(again.ema, s.ema);

        let mut no_retention = s.clone();
        no_retention.config.beta = 0.0;
        let t = update_ema(&[0.9, 0.1], &no_retention);
        assert_eq!(t.ema.as_deref(), Some(&[0.9, 0.1][..]));
    }

    #[test]
    fn ema_geometric_contraction() {
        let cfg = MarConfig {
            epsilon: 0.2,
            beta: 0.9,
        };
        for init in [0.01, 0.3, 0.95] {
            let c = 0.62;
            let mut s = MarState::new(1, cfg);
            s.ema = Some(vec![init]);
            for _ in 0..200 {
                s = update_ema(&[c], &s);
            }
            let bound = 0.9f64.powi(200) * (init - c).abs();
            let gap = (s.ema.as_ref().unwrap()[0] - c).abs();
            assert!(gap <= bound + 1e-15, "gap {gap} bound {bound}");
        }
    }

    #[test]
    fn softmax_weights() {
        let s = MarState::new(4, MarConfig::default());
        let w = normalize_weights(&[1.1; 4], &s).weights;
        assert!(w.iter().all(|&x| close(x, 0.25, 1e-15)));

        let w = normalize_weights(&[1.2, 0.8], &MarState::new(2, MarConfig::default())).weights;
        // sigma(0.4) = 1 / (1 + e^-0.4)
        let s04 = 1.0 / (1.0 + (-0.4f64).exp());
        assert!(close(w[0], s04, 1e-12) && close(w[1], 1.0 - s04, 1e-12));
        assert!(close(w[0], 0.5987, 1e-4) && close(w[1], 0.4013, 1e-4));
    }

    #[test]
    fn lowering_a_metric_raises_its_weight() {
        let mut s = MarState::new(3, MarConfig::default());
        s.ema = Some(vec![0.5, 0.5, 0.5]);
        let base = s.observe(&[0.5, 0.55, 0.5]).weights;
        let lowered = s.observe(&[0.5, 0.45, 0.5]).weights;
        assert!(lowered[1] > base[1]);
    }

    #[test]
    fn first_observation_is_uniform() {
        let s = MarState::new(3, MarConfig::default()).observe(&[0.1, 0.5, 0.9]);
        assert_eq!(s.deviation, vec![1.0; 3]);
        assert!(s.weights.iter().all(|&w| close(w, 1.0 / 3.0, 1e-15)));
        assert_eq!(s.ema.as_deref(), Some(&[0.1, 0.5, 0.9][..]));
    }

    #[test]
    fn decoupled_hand_values() {
        let g = RewardGroup::new(vec![vec![1.0, 0.5], vec![2.0, 0.5], vec![3.0, 0.5]]).unwrap();
        let a = decoupled_advantages(&g);
        // mean 2, population std sqrt(2/3)
        let z = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!(
            close(a[0][0], -z, 1e-12) && close(a[1][0], 0.0, 1e-12) && close(a[2][0], z, 1e-12)
        );
        assert!(close(z, 1.2247, 1e-4));
        assert!(a.iter().all(|row| row[1] == 0.0));
    }

    #[test]
    fn aggregate_cases() {
        assert_eq!(
            aggregate_advantages(&[vec![1.0, -1.0]], &[0.5, 0.5]),
            vec![0.0]
        );
        let m = vec![vec![0.3, 9.0, -1.0], vec![-0.7, 2.0, 4.0]];
        assert_eq!(aggregate_advantages(&m, &[1.0, 0.0, 0.0]), vec![0.3, -0.7]);
    }

    #[test]
    fn group_validation() {
        assert_eq!(
            RewardGroup::new(vec![vec![1.0]]),
            Err(MarError::GroupTooSmall(1))
        );
        assert!(matches!(
            RewardGroup::new(vec![vec![1.0, 2.0], vec![1.0]]),
            Err(MarError::Ragged { row: 1, .. })
        ));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("mar".parse::<RewardMode>(), Ok(RewardMode::Mar));
        assert_eq!(
            "bogus".parse::<RewardMode>(),
            Err(MarError::UnknownMode("bogus".into()))
        );
        let g = RewardGroup::new(vec![vec![0.1], vec![0.2]]).unwrap();
        let s = MarState::new(1, MarConfig::default());
        assert!(baseline_reward_modes(&g, "nope", &s).is_err());
    }

    #[test]
    fn mar_with_uniform_weights_is_no_weights() {
        let g = RewardGroup::new(vec![
            vec![0.1, 0.9, 0.3],
            vec![0.4, 0.2, 0.8],
            vec![0.7, 0.5, 0.1],
        ])
        .unwrap();
        let uniform = vec![1.0 / 3.0; 3];
        assert_eq!(
            group_advantages(&g, RewardMode::Mar, &uniform),
            group_advantages(&g, RewardMode::NoWeights, &uniform)
        );
    }

    #[test]
    fn single_metric_modes_agree() {
        let g = RewardGroup::new(vec![vec![0.1], vec![0.5], vec![0.35], vec![0.9]]).unwrap();
        let w = vec![1.0];
        let base = group_advantages(&g, RewardMode::Vanilla, &w);
        for mode in RewardMode::ALL {
            let a = group_advantages(&g, mode, &w);
            assert!(
                a.iter().zip(&base).all(|(x, y)| close(*x, *y, 1e-9)),
                "{mode}"
            );
        }
    }
}
