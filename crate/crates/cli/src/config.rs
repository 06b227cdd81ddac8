//! Run configuration: one JSON file driving training and sampling.

use std::path::{Path, PathBuf};

use decloud_core::error::{Error, Result};
use decloud_core::model::ModelConfig;
use decloud_core::sampler::SamplerConfig;
use decloud_core::schedule::ScheduleSpec;
use decloud_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

/// Dataset paths used by `train`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Training dataset container (`.json` manifest or base path).
    pub train: PathBuf,
    /// Optional held-out dataset, recorded for evaluation tooling.
    #[serde(default)]
    pub test: Option<PathBuf>,
}

/// Top-level config. Unknown keys are rejected everywhere, so typos fail
/// fast instead of silently using defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub data: DataPaths,
    pub output_dir: PathBuf,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_checkpoint_every() -> usize {
    1000
}

fn default_log_every() -> usize {
    1
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field consistency; cheap and run before any compute.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidConfig(format!(
                "config version {} unsupported (expected {})",
                self.version, CONFIG_VERSION
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.schedule.t_max != self.train.t_max {
            return Err(Error::InvalidConfig(format!(
                "schedule.t_max {} must equal train.t_max {}",
                self.schedule.t_max, self.train.t_max
            )));
        }
        if self.sampler.steps < 1 || self.sampler.steps > self.schedule.t_max {
            return Err(Error::InvalidConfig(format!(
                "sampler.steps {} outside 1..={}",
                self.sampler.steps, self.schedule.t_max
            )));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::InvalidConfig(
                "checkpoint_every and log_every must be >= 1".into(),
            ));
        }
        if !self.data.train.exists() {
            return Err(Error::InvalidConfig(format!(
                "training dataset not found: {}",
                self.data.train.display()
            )));
        }
        if let Some(test) = &self.data.test {
            if !test.exists() {
                return Err(Error::InvalidConfig(format!(
                    "test dataset not found: {}",
                    test.display()
                )));
            }
        }
        Ok(())
    }
}

/// Resolves an output path against `DECLOUD_OUT_DIR` when that is set and
/// the path is relative.
pub fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os("DECLOUD_OUT_DIR") {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
