//! Experiment runner library behind the `replaybench` binary: plan parsing
//! and matrix expansion, persistent run execution, and result
//! summarization.

pub mod plan;
pub mod runner;
pub mod summary;

pub use plan::{parse_plan, ExperimentPlan, PlanError, PlanOverrides, PlannedRun};
pub use runner::{execute, ExecutionReport, RESULTS_HEADER};
pub use summary::{summarize, Summary, SummaryRow};
