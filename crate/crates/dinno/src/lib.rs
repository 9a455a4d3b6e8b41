#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Experiment runner for decentralized Bayesian occupancy mapping: TOML
//! configuration, file formats, the TCP peer transport and the scenario
//! drivers behind the `dinno` command.

pub mod config;
pub mod experiment;
pub mod io;
pub mod socket;

pub use config::ExperimentConfig;
