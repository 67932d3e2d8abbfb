//! Experiment harness for the `gapdetect-core` detectors: TOML configuration,
//! Monte Carlo sweeps with deterministic block-parallel simulation, training
//! runs, JSON checkpoints, CSV results and the `gapdetect` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod sweep;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
