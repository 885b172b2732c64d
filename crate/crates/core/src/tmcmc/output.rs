use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RunResult, SampleSet, PARAM_NAMES};
use crate::error::{Error, Result};

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub map_theta: serde_json::Map<String, serde_json::Value>,
    pub map_log_lik: f64,
    pub map_log_prior: f64,
    pub stage_p: Vec<f64>,
    /// `null` for the prior draw.
    pub acceptance_rates: Vec<Option<f64>>,
    pub stage_seconds: Vec<f64>,
    pub population_n: usize,
    pub seed: u64,
    pub evaluations: usize,
    pub config: serde_json::Value,
}

impl Summary {
    pub fn new(result: &RunResult, seed: u64, config: serde_json::Value) -> Self {
        let map_theta = PARAM_NAMES
            .iter()
            .zip(&result.map.theta)
            .map(|(k, v)| (k.to_string(), serde_json::json!(v)))
            .collect();
        Self {
            map_theta,
            map_log_lik: result.map.log_lik,
            map_log_prior: result.map.log_prior,
            stage_p: result.stages.iter().map(|s| s.p).collect(),
            acceptance_rates: result.stages.iter().map(|s| s.acceptance_rate).collect(),
            stage_seconds: result.stages.iter().map(|s| s.elapsed_s).collect(),
            population_n: result.stages[0].samples.len(),
            seed,
            evaluations: result.evaluations,
            config,
        }
    }
}

/// One row per sample: θ columns, then `log_lik`, `log_prior`.
pub fn stage_csv(set: &SampleSet) -> String {
    let mut out = PARAM_NAMES.join(",");
    out.push_str(",log_lik,log_prior\n");
    for s in &set.samples {
        for v in &s.theta {
            write!(out, "{v},").unwrap();
        }
        writeln!(out, "{},{}", s.log_lik, s.log_prior).unwrap();
    }
    out
}

/// Writes `stage_NNN.csv` for every stage and `summary.json` into `dir`.
pub fn write_results(dir: &Path, result: &RunResult, seed: u64, config: serde_json::Value) -> Result<Summary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for set in &result.stages {
        let path = dir.join(format!("stage_{:03}.csv", set.stage));
        fs::write(&path, stage_csv(set)).map_err(|e| Error::io(&path, e))?;
    }
    let summary = Summary::new(result, seed, config);
    let path = dir.join(SUMMARY_FILE);
    // non-finite log-likelihoods become null in JSON
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
