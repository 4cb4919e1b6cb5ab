use std::path::Path;

use absolutenet::data::SynthConfig;
use absolutenet::ga::GaConfig;
use absolutenet::model::ModelConfig;
use absolutenet::train::{CvOptions, TrainConfig};
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// Everything a run depends on besides its input and output paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cv: CvOptions,
    pub ga: GaConfig,
}

impl Default for RunConfig {
    /// Desk-scale budgets: 30 selection and 10 retraining epochs.
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs_select: 30,
                epochs_retrain: 10,
                ..Default::default()
            },
            cv: CvOptions {
                parallel: true,
                ..Default::default()
            },
            ga: GaConfig {
                parallel: true,
                ..Default::default()
            },
        }
    }
}

/// Recursively overlays `top` onto `base`; tables merge, other values replace.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Unparseable or invalid config file; reported as a usage error.
#[derive(Debug)]
pub struct ConfigError {
    pub path: String,
    pub detail: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config {}: {}", self.path, self.detail)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    /// Defaults, then each file in order; later files win key by key.
    pub fn load(files: &[&Path]) -> Result<Self> {
        let mut value = toml::Value::try_from(RunConfig::default()).context("serializing defaults")?;
        for path in files {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let top: toml::Value = toml::from_str(&text).map_err(|e| ConfigError {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
            merge(&mut value, top);
        }
        let config: RunConfig = value.try_into().map_err(|e: toml::de::Error| ConfigError {
            path: files
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(", "),
            detail: e.to_string(),
        })?;
        Ok(config)
    }
}
