//! Experiment orchestration: configs, benchmark tasks, runs, budget sweeps
//! and the self-validation suite.

pub mod config;
pub mod run;
pub mod tasks;
pub mod validate;

pub use config::{ExperimentSpec, Method, RawConfig, SweepSpec, Task};
pub use run::{
    check_budget_parity, plan_budget, run_experiment, run_experiment_with, run_sweep, Budget,
    ResultRow, RunOutcome, RunSummary, SweepOutcome, SweepRow,
};
pub use tasks::{Family, TaskSetup};
pub use validate::{validate, CheckResult, Suite, ValidationHooks, ValidationReport};
