//! Experiment orchestration for the reach task: dataset generation,
//! training with or without the alignment term, closed-loop evaluation,
//! ablation sweeps and charts.

pub mod commands;
pub mod config;
pub mod data;
pub mod eval;
pub mod metrics;
pub mod plot;
pub mod train;

pub use config::ExperimentConfig;
