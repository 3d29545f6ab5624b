//! End-to-end pipelines: demos, optional EDP, SFT, optional RL, evaluation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use thiserror::Error;

use crate::demo::{self, DemoError, DemoSet, DemoSummary, EdpConfig};
use crate::env::{EnvConfig, EnvError};
use crate::mar::{MarState, RewardMode};
use crate::policy::{self, PolicyError, PolicyParams, SftConfig};
use crate::pool::{McPool, PoolConfig, PoolError};
use crate::rng;
use crate::trainer::{self, EvalConfig, EvalReport, StepReport, TrainConfig, TrainError};

pub const REPORT_FORMAT: &str = "toolrl-report";
pub const REPORT_VERSION: u32 = 1;

mod seed_tag {
    pub const DEMOS: u64 = 0x101;
    pub const EDP: u64 = 0x102;
    pub const SFT: u64 = 0x103;
    pub const TRAIN: u64 = 0x104;
    pub const POOL: u64 = 0x105;
    pub const EVAL: u64 = 0x106;
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config at `{path}`: {reason}")]
    InvalidConfig { path: String, reason: String },
    #[error("unknown ablation mode `{0}`")]
    UnknownMode(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("i/o error on {path}: {reason}")]
    Io { path: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Vanilla,
    NoSft,
    NoRl,
    NoEdp,
    NoAlphaT,
    NoAlphaM,
    NoMar,
    NoDecouple,
    NoWeights,
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 10] = [
        AblationMode::Vanilla,
        AblationMode::NoSft,
        AblationMode::NoRl,
        AblationMode::NoEdp,
        AblationMode::NoAlphaT,
        AblationMode::NoAlphaM,
        AblationMode::NoMar,
        AblationMode::NoDecouple,
        AblationMode::NoWeights,
        AblationMode::Full,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::Vanilla => "vanilla",
            AblationMode::NoSft => "no_sft",
            AblationMode::NoRl => "no_rl",
            AblationMode::NoEdp => "no_edp",
            AblationMode::NoAlphaT => "no_alpha_t",
            AblationMode::NoAlphaM => "no_alpha_m",
            AblationMode::NoMar => "no_mar",
            AblationMode::NoDecouple => "no_decouple",
            AblationMode::NoWeights => "no_weights",
            AblationMode::Full => "full",
        }
    }

    /// The pipeline this mode runs.
    pub fn plan(&self) -> Plan {
        let full = Plan {
            alpha_t: true,
            alpha_m: true,
            sft: true,
            rl: Some(RewardMode::Mar),
        };
        match self {
            AblationMode::Vanilla => Plan {
                alpha_t: false,
                alpha_m: false,
                rl: Some(RewardMode::Vanilla),
                ..full
            },
            AblationMode::NoSft => Plan { sft: false, ..full },
            AblationMode::NoRl => Plan { rl: None, ..full },
            AblationMode::NoEdp => Plan {
                alpha_t: false,
                alpha_m: false,
                ..full
            },
            AblationMode::NoAlphaT => Plan {
                alpha_t: false,
                ..full
            },
            AblationMode::NoAlphaM => Plan {
                alpha_m: false,
                ..full
            },
            AblationMode::NoMar => Plan {
                rl: Some(RewardMode::Vanilla),
                ..full
            },
            AblationMode::NoDecouple => Plan {
                rl: Some(RewardMode::NoDecouple),
                ..full
            },
            AblationMode::NoWeights => Plan {
                rl: Some(RewardMode::NoWeights),
                ..full
            },
            AblationMode::Full => full,
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, ExperimentError> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ExperimentError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub alpha_t: bool,
    pub alpha_m: bool,
    pub sft: bool,
    /// Reward mode for the RL stage; `None` skips RL.
    pub rl: Option<RewardMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    /// Environment file; the built-in default when absent. Relative paths
    /// resolve against the experiment file's directory.
    pub env: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub num_demos: usize,
    pub edp: EdpConfig,
    pub sft: SftConfig,
    pub train: TrainConfig,
    /// Route tool calls through the shared pool during RL.
    pub use_pool: bool,
    pub pool: PoolConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            env: None,
            out: None,
            num_demos: 200,
            edp: EdpConfig::default(),
            sft: SftConfig::default(),
            train: TrainConfig::default(),
            use_pool: true,
            pool: PoolConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.num_demos == 0 {
            return Err(ExperimentError::InvalidConfig {
                path: "num_demos".into(),
                reason: "must be at least 1".into(),
            });
        }
        if self.eval.num_states == 0 || self.eval.rollouts_per_state < 2 {
            return Err(ExperimentError::InvalidConfig {
                path: "eval".into(),
                reason: "need at least one state and two rollouts per state".into(),
            });
        }
        self.edp.validate()?;
        self.train.validate()?;
        self.pool.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::InvalidConfig {
            path: "<toml>".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file, resolving a relative `env` path against it.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(env), Some(dir)) = (&cfg.env, path.parent()) {
            if env.is_relative() {
                cfg.env = Some(dir.join(env));
            }
        }
        Ok(cfg)
    }

    pub fn load_env(&self) -> Result<EnvConfig, ExperimentError> {
        match &self.env {
            Some(p) => Ok(EnvConfig::load(p)?),
            None => Ok(EnvConfig::default()),
        }
    }

    /// Copies of the stage configs with seeds derived from the master seed.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        c.edp.seed = rng::mix(s, &[seed_tag::EDP]);
        c.sft.seed = rng::mix(s, &[seed_tag::SFT]);
        c.train.seed = rng::mix(s, &[seed_tag::TRAIN]);
        c.pool.seed = rng::mix(s, &[seed_tag::POOL]);
        c.eval.seed = rng::mix(s, &[seed_tag::EVAL]);
        c
    }

    pub fn demo_seed(&self) -> u64 {
        rng::mix(self.seed, &[seed_tag::DEMOS])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSummary {
    pub initial_log_likelihood: f64,
    pub final_log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format: String,
    pub version: u32,
    pub mode: AblationMode,
    pub plan: Plan,
    pub seed: u64,
    pub env_digest: String,
    pub oracle_demos: DemoSummary,
    pub sft_demos: DemoSummary,
    pub sft: Option<SftSummary>,
    pub steps: Vec<StepReport>,
    pub eval: EvalReport,
    pub params_digest: String,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Hex SHA-256 of the JSON encoding.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub params: PolicyParams,
    pub mar: Option<MarState>,
    pub sft_set: DemoSet,
}

/// Runs the pipeline variant for `mode`. `workers` only changes speed.
pub fn run_experiment(
    config: &ExperimentConfig,
    env: &EnvConfig,
    mode: AblationMode,
    workers: usize,
) -> Result<ExperimentOutcome, ExperimentError> {
    config.validate()?;
    env.validate()?;
    let cfg = config.seeded();
    let plan = mode.plan();

    let oracle = demo::generate_oracle_demos(env, cfg.num_demos, cfg.demo_seed())?;
    let edp = EdpConfig {
        alpha_t: if plan.alpha_t { cfg.edp.alpha_t } else { 0.0 },
        alpha_m: if plan.alpha_m { cfg.edp.alpha_m } else { 0.0 },
        seed: cfg.edp.seed,
    };
    let sft_set = demo::build_sft_set(env, &oracle, &edp)?;

    let mut params = PolicyParams::zeros(env);
    let mut sft = None;
    if plan.sft {
        let out = policy::sft_update(&params, env, &sft_set, &cfg.sft)?;
        sft = Some(SftSummary {
            initial_log_likelihood: out.log_likelihood[0],
            final_log_likelihood: out.final_log_likelihood(),
        });
        params = out.params;
    }

    let mut steps = Vec::new();
    let mut mar = None;
    if let Some(reward_mode) = plan.rl {
        let train = TrainConfig {
            reward_mode,
            workers,
            ..cfg.train.clone()
        };
        let pool = if cfg.use_pool {
            Some(McPool::new(cfg.pool.clone(), Arc::new(env.clone()))?)
        } else {
            None
        };
        let out = trainer::train(&params, &train, env, pool.as_ref())?;
        if let Some(p) = &pool {
            let stats = p.stats();
            if stats.exclusion_violations != 0 || stats.free_resources != cfg.pool.num_resources {
                return Err(ExperimentError::InvalidConfig {
                    path: "pool".into(),
                    reason: "pool invariant violated during training".into(),
                });
            }
        }
        params = out.params;
        mar = Some(out.mar);
        steps = out.reports;
    }

    let eval = trainer::evaluate(&params, env, &cfg.eval, workers)?;
    let params_digest = hex::encode(Sha256::digest(params.to_checkpoint(env).as_bytes()));
    let report = ExperimentReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        mode,
        plan,
        seed: cfg.seed,
        env_digest: env.digest(),
        oracle_demos: oracle.summary(env),
        sft_demos: sft_set.summary(env),
        sft,
        steps,
        eval,
        params_digest,
    };
    Ok(ExperimentOutcome {
        report,
        params,
        mar,
        sft_set,
    })
}

impl ExperimentOutcome {
    /// Writes `report.json`, `report.sha256`, `steps.csv` and `params.json`
    /// into `dir`.
    pub fn write(&self, env: &EnvConfig, dir: &Path) -> Result<(), ExperimentError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let write = |name: &str, body: &[u8]| {
            let path = dir.join(name);
            fs::write(&path, body).map_err(io_err(&path))
        };
        write("report.json", self.report.to_json().as_bytes())?;
        write(
            "report.sha256",
            format!("{}\n", self.report.digest()).as_bytes(),
        )?;
        let mut csv = Vec::new();
        trainer::write_step_csv(env, &self.report.steps, &mut csv).expect("writing to memory");
        write("steps.csv", &csv)?;
        write("params.json", self.params.to_checkpoint(env).as_bytes())?;
        Ok(())
    }
}
