//! Training machinery for a tool-orchestrating restoration agent.
//!
//! The crate is organised bottom-up:
//!
//! - [`env`]: synthetic degradation environment (states, tools, metrics).
//! - [`demo`]: oracle demonstrations and exploration-driven perturbation.
//! - [`policy`]: linear-softmax policy with exact log-prob gradients.
//! - [`mar`]: multi-dimensional adaptive reward and group advantages.
//! - [`pool`]: shared, mutually exclusive tool-execution pool.
//! - [`trainer`]: group-rollout policy-gradient loop and diversity analytics.
//! - [`experiment`]: end-to-end pipelines and ablation variants.

pub mod demo;
pub mod env;
pub mod experiment;
pub mod mar;
pub mod policy;
pub mod pool;
pub mod rng;
pub mod trainer;
