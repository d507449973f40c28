use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::models::{ModelConfig, TuningMode};
use crate::numerics::AdamWConfig;
use crate::objective::{CombineMode, CtrVariant};

/// Optimization settings for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl StageConfig {
    pub fn pretrain_default() -> Self {
        Self {
            epochs: 200,
            batch_size: 1024,
            learning_rate: 1e-3,
            weight_decay: 2e-4,
        }
    }

    pub fn finetune_default() -> Self {
        Self {
            epochs: 10,
            batch_size: 1024,
            learning_rate: 5e-4,
            weight_decay: 2e-4,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self, stage: &str) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "{stage}.batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            bail!(Config, "{stage}.learning_rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bail!(Config, "{stage}.weight_decay must be finite and non-negative");
        }
        Ok(())
    }
}

/// Model, objective and both training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub token_dim: usize,
    pub model: ModelConfig,
    pub combine: CombineMode,
    pub beta: f64,
    pub variant: CtrVariant,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    /// Start the downstream top layer from the pre-trained one where shapes allow.
    pub warm_start: bool,
    pub tuning_mode: TuningMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            token_dim: 64,
            model: ModelConfig::default(),
            combine: CombineMode::Average,
            beta: 1.0,
            variant: CtrVariant::Vanilla,
            pretrain: StageConfig::pretrain_default(),
            finetune: StageConfig::finetune_default(),
            warm_start: true,
            tuning_mode: TuningMode::Full,
        }
    }
}

impl PipelineConfig {
    /// Defaults for a ResNet top layer; it fine-tunes at 1e-3.
    pub fn resnet_default() -> Self {
        Self {
            model: ModelConfig::Resnet(Default::default()),
            finetune: StageConfig {
                learning_rate: 1e-3,
                ..StageConfig::finetune_default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 {
            bail!(Config, "token_dim must be positive");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            bail!(Config, "beta must be finite and non-negative, got {}", self.beta);
        }
        self.model.validate(self.token_dim)?;
        self.pretrain.validate("pretrain")?;
        self.finetune.validate("finetune")?;
        if self.tuning_mode.requires_transformer() && !matches!(self.model, ModelConfig::Transformer(_)) {
            bail!(Config, "tuning_mode {:?} needs a transformer model", self.tuning_mode);
        }
        Ok(())
    }
}
