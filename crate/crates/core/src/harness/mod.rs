//! Experiment configuration, scenarios, training loop and reports.

mod compare;
mod config;
mod runner;
pub mod scenarios;
pub mod verify;

pub use compare::{run_compute_matched, ComparisonEntry, ComparisonReport};
pub use config::{parse_kv, EnergyNorm, EstimatorChoice, ExperimentConfig, SamplingMode, ScenarioKind};
pub use runner::{
    csv_string, evaluate_estimator, run_experiment, seq_score_dot, shared_contexts, summary_json, write_csv,
    write_outputs, RunRecord, StepEval, StepRow,
};
