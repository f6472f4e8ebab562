//! Configuration, experiment orchestration and reporting for risk-averse
//! RLHF runs on the toy valence environment.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiment;
pub mod report;
