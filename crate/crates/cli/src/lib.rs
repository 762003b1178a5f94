//! Batch front end for `sarl-core`: tabular evaluation and sweeps, agent
//! training, attacks, certificates and the oracle-backed acceptance checks.

pub mod checks;
pub mod commands;
pub mod config;
