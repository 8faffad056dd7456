//! Failure-injection experiments for the resilient PCG solvers: config
//! parsing, scenario execution, metrics and report files.

pub mod config;
pub mod error;
pub mod experiment;
pub mod report;

pub use config::{ExperimentSpec, FailureAt, Location, MatrixSource};
pub use error::{HarnessError, Result};
pub use experiment::{
    median, residual_drift, run_experiment, worst_case_failure_iteration, Drift,
    ExperimentReport, RunRecord, Scenario, ScenarioSummary, SCHEMA_VERSION,
};
pub use report::{emit_report, load_report, render_summary, write_csv};
