//! Run configuration loaded from JSON; omitted fields take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::ClipParams;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::optim::OptimConfig;

/// Seed of the default synthetic dataset.
pub const DEFAULT_DATA_SEED: u64 = 20_240_917;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateSpec {
    pub clips: usize,
    /// Trailing clips held out for validation.
    pub val: usize,
    pub seed: u64,
    pub params: ClipParams,
}

impl Default for GenerateSpec {
    fn default() -> Self {
        Self {
            clips: 200,
            val: 40,
            seed: DEFAULT_DATA_SEED,
            params: ClipParams::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory written by `gen-data`; takes precedence over `generate`.
    pub path: Option<PathBuf>,
    pub generate: GenerateSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Steps between checkpoints; the final step is always saved.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: 500,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.data.generate.params.validate()?;
        if self.model.cls != self.data.generate.params.cls && self.data.path.is_none() {
            return Err(Error::Config(format!(
                "model has {} classes but the generated data has {}",
                self.model.cls, self.data.generate.params.cls
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
