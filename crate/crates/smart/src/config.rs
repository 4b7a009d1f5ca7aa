//! Experiment configuration, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smart_core::data::TaskKind;
use smart_core::model::{AblationFlags, ModelConfig};
use smart_core::train::TrainConfig;

use crate::error::{Error, Result};

pub const DEFAULT_SEEDS: [u64; 3] = [1, 42, 3407];

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

fn default_task() -> TaskKind {
    TaskKind::Binary
}

fn yes() -> bool {
    true
}

/// Where a dataset lives: `train.csv`, `val.csv` and `test.csv` in `dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    /// Variable columns in model order; read from the train header if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variables: Option<Vec<String>>,
    /// Separate `patient_id,label...` file shared by all splits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// z-score observed values with training-split statistics.
    #[serde(default = "yes")]
    pub normalize: bool,
    /// Keep only the first `max_steps` hours of every stay.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl DataConfig {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        DataConfig {
            dir: dir.into(),
            variables: None,
            labels: None,
            normalize: true,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds for commands that repeat runs (`sweep`, `ablate`).
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    #[serde(default = "default_task")]
    pub task: TaskKind,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: AblationFlags,
}

impl ExperimentConfig {
    pub fn new(data: DataConfig) -> Self {
        ExperimentConfig {
            seeds: default_seeds(),
            data,
            task: default_task(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationFlags::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Read a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if config.data.dir.is_relative() {
            config.data.dir = base.join(&config.data.dir);
        }
        if let Some(l) = config.data.labels.as_mut().filter(|l| l.is_relative()) {
            *l = base.join(&*l);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: smart_core::Error| Error::config(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.ablation.validate().map_err(wrap)?;
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.task.outputs() == 0 {
            return Err(Error::config("task has no outputs"));
        }
        Ok(())
    }

    /// Copy with `seed` as the training seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c
    }
}
