use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugmentPolicy;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;

fn default_lr0() -> f64 {
    1e-4
}
fn default_weight_decay() -> f64 {
    1e-8
}
fn default_batch_size() -> usize {
    4
}
fn default_epochs() -> usize {
    200
}
fn default_decay_factor() -> f64 {
    0.9
}
fn default_decay_every() -> usize {
    20
}
fn default_checkpoint_every() -> usize {
    50
}
fn default_validate_every() -> usize {
    10
}

/// Everything a training run needs; also the JSON run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset directory holding `manifest.json`.
    pub data_dir: PathBuf,
    /// Receives checkpoints and logs.
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_decay_every")]
    pub decay_every: usize,
    #[serde(default)]
    pub seed: u64,
    /// Epochs between checkpoints; a final checkpoint is always written.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Epochs between held-out evaluations; 0 disables them.
    #[serde(default = "default_validate_every")]
    pub validate_every: usize,
    #[serde(default)]
    pub augment: AugmentPolicy,
    /// Stop after this many optimisation steps in total.
    #[serde(default)]
    pub max_steps: Option<u64>,
    /// Continue from this checkpoint.
    #[serde(default)]
    pub resume: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(data_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            out_dir: out_dir.into(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            lr0: default_lr0(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            decay_factor: default_decay_factor(),
            decay_every: default_decay_every(),
            seed: 0,
            checkpoint_every: default_checkpoint_every(),
            validate_every: default_validate_every(),
            augment: AugmentPolicy::default(),
            max_steps: None,
            resume: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr0", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("decay_factor", "must lie in (0, 1]"));
        }
        if self.decay_every == 0 {
            return Err(Error::config("decay_every", "must be at least 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be at least 1"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("max_steps", "must be at least 1 when set"));
        }
        Ok(())
    }
}

/// `lr0 · decay_factor^⌊epoch / decay_every⌋`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}
