//! Config-driven experiments that write CSV tables and optional SVG plots.

pub mod commands;
pub mod config;
pub mod plot;

pub use commands::{run_experiment, Outcome};
pub use config::{parse_config, Experiment, ExperimentConfig};
