//! Run configuration: one JSON document, every seed explicit.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use twospeed_core::data::AugmentPolicy;
use twospeed_core::nn::{ModelConfig, TrainParams};
use twospeed_core::schedule::{Increment, TimingMode, TrainingSchedule};

use crate::{usage, CliError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    pub holdout_fraction: f64,
    pub val_fraction: f64,
    pub increments: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingConfig {
    WallClock,
    Zeroed,
}

impl From<TimingConfig> for TimingMode {
    fn from(t: TimingConfig) -> TimingMode {
        match t {
            TimingConfig::WallClock => TimingMode::WallClock,
            TimingConfig::Zeroed => TimingMode::Zeroed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    /// Global seed; per-action training seeds derive from it.
    pub seed: u64,
    pub split: SplitConfig,
    pub slow_cadence: usize,
    pub fast_model: ModelConfig,
    pub slow_model: ModelConfig,
    pub fast_training: TrainParams,
    pub slow_training: TrainParams,
    pub augment: AugmentPolicy,
    /// Fusion weights (fast, slow) used whenever both models exist.
    pub ensemble_weights: (f64, f64),
    pub timing: TimingConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !self.dataset.is_dir() {
            return Err(usage(format!(
                "dataset path {} is not a directory",
                self.dataset.display()
            )));
        }
        let (wf, ws) = self.ensemble_weights;
        if !(wf.is_finite() && ws.is_finite() && wf > 0.0 && ws > 0.0) {
            return Err(usage(format!(
                "ensemble weights ({wf}, {ws}) must be positive and finite"
            )));
        }
        self.augment
            .validate()
            .map_err(|e| usage(format!("augment policy: {e}")))?;
        self.schedule().validate().map_err(usage)?;
        Ok(())
    }

    /// Materialize the training schedule with generated labels T1..Tn.
    pub fn schedule(&self) -> TrainingSchedule {
        TrainingSchedule {
            increments: self
                .split
                .increments
                .iter()
                .enumerate()
                .map(|(i, &fraction)| Increment {
                    label: format!("T{}", i + 1),
                    fraction,
                })
                .collect(),
            slow_cadence: self.slow_cadence,
            fast_config: self.fast_model.clone(),
            slow_config: self.slow_model.clone(),
            fast_params: self.fast_training.clone(),
            slow_params: self.slow_training.clone(),
        }
    }
}
