use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::model::ModelConfig;
use crate::train_eval::TrainConfig;

/// The three independent randomness sources of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Stratified sampling and the train/test split.
    pub sample: u64,
    /// Parameter initialization.
    pub init: u64,
    /// Minibatch order.
    pub train: u64,
}

/// Every setting of a run. Loaded from an optional JSON file, then
/// overridden by command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub budget: Option<usize>,
    /// Share of each class's records that goes to the training split.
    pub split_ratio: f64,
    /// Trailing share of the (time-ordered) training records held out for validation.
    pub val_fraction: f64,
    pub seeds: Seeds,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub binary: bool,
    /// Add wall-clock timestamps to reports (makes them non-reproducible).
    pub record_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: Vec::new(),
            out: None,
            budget: None,
            split_ratio: 0.8,
            val_fraction: 0.1,
            seeds: Seeds::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            binary: false,
            record_time: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
    }

    /// Pushes the named seeds into the sub-configs that consume them.
    pub fn sync_seeds(&mut self) {
        self.model.seed = self.seeds.init;
        self.train.seed = self.seeds.train;
    }

    /// The effective configuration without file paths, for report provenance.
    pub fn provenance(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("input");
            map.remove("out");
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            problems.push(format!("split_ratio must be in (0, 1), got {}", self.split_ratio));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            problems.push(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if self.features.window == 0 || self.features.stride == 0 {
            problems.push("window and stride must be >= 1".to_string());
        }
        if let Err(Error::Config(mut p)) = self.train.validate() {
            problems.append(&mut p);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}
