//! Risk-averse KL-regularized policy optimization over token-level MDPs.
//!
//! The crate covers the token MDP and batch padding, a synthetic scored
//! environment, a featurized softmax policy with a value head, the KL-shaped
//! reward and its adaptive coefficient, CVaR estimation with tail selection,
//! the soft-risk batch schedule, the PPO trainer and the evaluation metrics.

// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cvar;
pub mod env;
pub mod error;
pub mod eval;
pub mod mdp;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod schedule;
pub mod shaping;
pub mod trainer;

pub use error::{Error, Result};
