//! Experiment harness for the stdfnc classifier: configuration, checkpoints,
//! metrics tables, SVG reports and the staged pipeline behind the `stdfnc`
//! binary.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod report;
pub mod run;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use run::{run_experiment, RunSummary, Stage};
