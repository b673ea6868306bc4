//! Multi-view group-relative policy optimization for conditional
//! flow-matching models, on a synthetic attribute-structured domain.
//!
//! The crate is organized bottom-up:
//!
//! * [`condspace`]: conditions, toy data distribution, rewards,
//! * [`flowmodel`]: the velocity network, pretraining and reverse-mode
//!   gradients,
//! * [`sampler`]: ODE/SDE samplers and Gaussian transition densities,
//! * [`enhancer`]: condition augmentation,
//! * [`grpo`]: the single-view objective and optimizer,
//! * [`mvgrpo`]: multi-view advantages, objective, drift and training,
//! * [`harness`]: configuration, persistence, evaluation and the CLI.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod condspace;
pub mod enhancer;
pub mod error;
pub mod flowmodel;
pub mod grpo;
pub mod harness;
pub mod mvgrpo;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
