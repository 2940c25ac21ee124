//! Desk-scale laboratory for reinforcement learning with verifiable rewards.
//!
//! The crate trains a tiny autoregressive policy on synthetic modular
//! arithmetic prompts with two data-efficiency mechanisms:
//!
//! * prompts are scored by teacher-forced perplexity under the current policy
//!   and a fixed-size window slides over the ascending-perplexity order as
//!   training progresses ([`scheduler`]);
//! * rollouts are reweighted by their mean token entropy relative to the
//!   micro-batch mean ([`weighting`]) inside a group-standardized,
//!   asymmetrically clipped surrogate ([`objective`]).
//!
//! [`trainer`] wires these into an online loop and writes plot-ready metrics.

// `!(x > y)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod objective;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod scheduler;
pub mod stats;
pub mod taskgen;
pub mod trainer;
pub mod weighting;

pub use error::{PrepoError, Result};
pub use objective::{ClipConfig, Group, LossReport};
pub use policy::{Policy, PolicyLayout, SnapshotPolicy, TokenDistribution};
pub use rollout::Rollout;
pub use scheduler::{Pacing, ScoredBatch, SelectionState};
pub use taskgen::{Prompt, RewardSpec, Vocab};
pub use weighting::{EntropyMode, EntropyWeights};
