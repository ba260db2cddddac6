//! Benchmark and scenario drivers.
//!
//! [`run_bench`] measures reconfiguration time (context event emitted to
//! binding held by the user) over repeated triggers of a binding policy, with
//! the stub cache on, bypassed, or cleared before every trial.
//! [`run_scenario`] replays a scripted trace of context events against a set
//! of policies and reports the resulting device states and cache counters.

mod bench;
mod report;
mod scenario;
mod testbed;

use thiserror::Error;

pub use bench::{
    bench_policy, bench_services, run_bench, run_bench_on, BenchConfig, BenchMode, BenchRun, TrialOutcome,
    TrialRecord,
};
pub use report::{emit_report, parse_csv, summarize, summarize_latencies, ReportFormat, Summary, CSV_HEADER};
pub use scenario::{
    run_scenario, run_scenario_str, Directive, DirectiveStep, EventStep, Scenario, ScenarioReport, TraceStep,
    ROOM1_SCENARIO,
};
pub use testbed::{Deployment, ServiceSpec, Testbed};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("trial {index} failed: {message}")]
    Trial {
        index: usize,
        message: String,
        partial: Vec<TrialRecord>,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Setup(_) | HarnessError::InvalidConfig(_) | HarnessError::InsufficientSamples(_) => 2,
            HarnessError::Trial { .. } => 3,
            HarnessError::Parse(_) => 4,
            HarnessError::Io(_) => 2,
        }
    }
}
