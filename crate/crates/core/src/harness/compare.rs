//! Compute-matched comparison of several configurations.

use serde::Serialize;

use super::config::ExperimentConfig;
use super::runner::{run_experiment, RunRecord};
use crate::diagnostics::{jitter2, steps_to_threshold};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonEntry {
    pub name: String,
    pub estimator: String,
    pub sampled_tokens: usize,
    pub token_budget: usize,
    pub jitter2_ref_reward: Option<f64>,
    pub jitter2_log_odds: Option<f64>,
    pub steps_to_threshold: Option<usize>,
    pub initial_entropy: Option<f64>,
    pub final_entropy: Option<f64>,
    pub final_log_odds: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub group_size: usize,
    pub steps: usize,
    pub max_len: usize,
    pub seed: u64,
    pub entries: Vec<ComparisonEntry>,
    #[serde(skip)]
    pub records: Vec<RunRecord>,
}

/// Runs every config after checking they share group size, step count,
/// length limit and seed.
pub fn run_compute_matched(configs: &[ExperimentConfig]) -> Result<ComparisonReport> {
    let first = configs
        .first()
        .ok_or_else(|| Error::Config("no configurations to compare".into()))?;
    for cfg in &configs[1..] {
        let key = |c: &ExperimentConfig| (c.group_size, c.steps, c.max_len, c.seed, c.scenario, c.mode);
        if key(cfg) != key(first) {
            return Err(Error::Config(format!(
                "{} and {} do not share group size, steps, max_len, seed, scenario and mode",
                first.name, cfg.name
            )));
        }
    }
    let mut entries = Vec::new();
    let mut records = Vec::new();
    for cfg in configs {
        let record = run_experiment(cfg)?;
        let reward = record.series(|r| r.ref_reward);
        let lo = record.series(|r| r.log_odds);
        entries.push(ComparisonEntry {
            name: cfg.name.clone(),
            estimator: cfg.estimator_label(),
            sampled_tokens: record.sampled_tokens,
            token_budget: record.token_budget,
            jitter2_ref_reward: jitter2(&reward).ok(),
            jitter2_log_odds: jitter2(&lo).ok(),
            steps_to_threshold: steps_to_threshold(&reward, cfg.threshold),
            initial_entropy: record.rows.first().and_then(|r| r.equiv_entropy),
            final_entropy: record.final_entropy,
            final_log_odds: record.final_log_odds,
        });
        records.push(record);
    }
    Ok(ComparisonReport {
        group_size: first.group_size,
        steps: first.steps,
        max_len: first.max_len,
        seed: first.seed,
        entries,
        records,
    })
}
