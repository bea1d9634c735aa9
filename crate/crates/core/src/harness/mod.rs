//! Synthetic data, tracking and training orchestration behind the CLI.

pub mod bank;
pub mod config;
pub mod crop;
pub mod runner;
pub mod scenario;
pub mod track;
pub mod train;
