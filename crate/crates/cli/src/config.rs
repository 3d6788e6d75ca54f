//! The JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use trax_core::aggregator::InferConfig;
use trax_core::linkers::{IlpConfig, LapConfig, Solver};
use trax_core::metrics::EvalConfig;
use trax_core::sim::SimConfig;
use trax_core::transformer::model::ModelConfig;
use trax_core::transformer::train::TrainConfig;

use crate::error::CliError;

pub const SEED_ENV: &str = "TRACK_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Largest admissible link length. No default exists; simulated data
    /// records one in its manifest.
    pub dist_max: Option<f64>,
    /// Radius of the detection-to-gt matching.
    pub delta_max: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dist_max: None,
            delta_max: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkerConfig {
    pub algorithm: Solver,
    /// Greedy acceptance threshold.
    pub theta: f64,
    /// Candidate-graph score floor.
    pub alpha: f64,
    pub ilp: IlpConfig,
    pub lap: LapConfig,
    pub infer: InferConfig,
}

impl Default for LinkerConfig {
    fn default() -> Self {
        LinkerConfig {
            algorithm: Solver::Greedy,
            theta: 0.5,
            alpha: 0.05,
            ilp: IlpConfig::default(),
            lap: LapConfig::default(),
            infer: InferConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub linker: LinkerConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.linker.ilp.costs.validate()?;
        if let Some(d) = self.data.dist_max {
            if !(d > 0.0) {
                return Err(CliError::usage("data.dist_max must be positive"));
            }
        }
        if !(self.data.delta_max > 0.0 && self.eval.r_eval > 0.0) {
            return Err(CliError::usage("data.delta_max and eval.r_eval must be positive"));
        }
        if !(0.0..=1.0).contains(&self.linker.theta) || !(0.0..1.0).contains(&self.linker.alpha) {
            return Err(CliError::usage("linker.theta must lie in [0, 1] and linker.alpha in [0, 1)"));
        }
        Ok(())
    }
}

/// What `simulate` generates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// Named preset, used when `config` is absent.
    pub preset: String,
    pub config: Option<SimConfig>,
    pub videos: usize,
    /// Train, val and test fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            preset: "easy".into(),
            config: None,
            videos: 10,
            ratios: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl SimulateConfig {
    pub fn sim_config(&self) -> Result<SimConfig, CliError> {
        match &self.config {
            Some(c) => Ok(c.clone()),
            None => Ok(SimConfig::preset(&self.preset)?),
        }
    }
}

/// Reads a JSON config, rejecting unknown keys.
pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// `TRACK_SEED`, when set.
pub fn seed_override() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}
