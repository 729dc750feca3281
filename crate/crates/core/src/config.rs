//! The single JSON document that configures a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::decoder::DecodeConfig;
use crate::error::{ensure, Error, Result};
use crate::eval::EvalConfig;
use crate::network::ModelConfig;
use crate::synth::SceneConfig;
use crate::targets::LossConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Seed of batch order and augmentation sampling.
    pub seed: u64,
    /// Loss rows are emitted every this many epochs.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-6,
            momentum: 0.9,
            steps: 2000,
            batch_size: 4,
            seed: 0,
            log_every: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub scene: SceneConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        self.eval.validate()?;
        self.scene.validate(Some(&self.model.grid))?;
        let t = &self.train;
        ensure!(t.learning_rate >= 0.0, Config, "learning rate must be non-negative");
        ensure!((0.0..1.0).contains(&t.momentum), Config, "momentum must be in [0, 1)");
        ensure!(t.batch_size > 0, Config, "batch size must be positive");
        ensure!(t.log_every > 0, Config, "log interval must be positive");
        ensure!(
            (0.0..=1.0).contains(&self.decode.threshold),
            Config,
            "decode threshold must be in [0, 1]"
        );
        ensure!(
            self.decode.sigma_nms.is_none_or(|s| s >= 0.0),
            Config,
            "sigma_nms must be non-negative"
        );
        ensure!(
            self.model.classes.class_count() > 0 && self.eval.class_id.is_none_or(|c| c < self.model.class_count()),
            Config,
            "evaluated class is outside the model classes"
        );
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Pretty JSON with every default written out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
