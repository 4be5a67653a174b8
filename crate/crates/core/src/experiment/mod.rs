//! Config-driven experiments: build a problem, run several flows from the
//! same initial ensemble and record their diagnostics.

mod config;
mod runner;
mod setup;

pub use config::{
    Bound, DarcyConfig, ExperimentConfig, FlowConfig, LinearEllipticConfig, Method, MethodConfig, OutputConfig,
    ProblemConfig,
};
pub use runner::{
    compare_methods, execute, run_experiment, run_method, summary_json, write_outputs, Comparison, MethodOutcome,
    MethodStatus, RunReport,
};
pub use setup::{build_setup, linear_truth_shape, ExperimentSetup};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    /// The configuration is malformed or inconsistent.
    #[error("invalid configuration: {0}")]
    Validation(String),
    /// A well-formed configuration that does not produce a usable problem.
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("i/o error: {0}")]
    Io(String),
}
