//! Experiment harness: run configuration, multi-seed runs with CSV metrics,
//! onboarding comparisons and summaries across seeds.

pub mod build;
pub mod config;
pub mod run;
pub mod summary;

pub use build::{build_federation, sample_assignments, union_assignment, EnvAssignment};
pub use config::RunConfig;
pub use run::{read_metrics, run_experiment, run_onboarding, EpochMetrics, OnboardingOutcome, OnboardingReport, METRICS_HEADER};
pub use summary::{mean_and_se, summarize, summarize_rows, Summary};
