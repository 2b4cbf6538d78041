use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::loader::LoaderConfig;
use crate::data::DatasetSelector;
use crate::loss::LossConfig;
use crate::{Error, Result};

/// Optimization and data hyperparameters plus the staged plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr_base: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Defaults for stages that leave them unset.
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch: usize,
    /// Batches whose gradients are summed before each optimizer step.
    pub grad_accum: usize,
    pub mask_ratio: f64,
    pub sensor_name_dropout: f64,
    pub band_window: usize,
    pub band_stride: usize,
    pub workers: usize,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub stages: Vec<StageConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub name: String,
    pub select: DatasetSelector,
    pub epochs: Option<usize>,
    pub warmup_epochs: Option<usize>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            name: "stage".into(),
            select: DatasetSelector::default(),
            epochs: None,
            warmup_epochs: None,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr_base: 1.5e-4,
            lr_min: 1e-5,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            epochs: 20,
            warmup_epochs: 2,
            batch: 8,
            grad_accum: 1,
            mask_ratio: 0.75,
            sensor_name_dropout: 0.1,
            band_window: crate::data::sampler::DEFAULT_WINDOW,
            band_stride: crate::data::sampler::DEFAULT_STRIDE,
            workers: 1,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            stages: default_stages(),
        }
    }
}

/// One sensor at L1, then a balanced mix of every sensor, then everything.
pub fn default_stages() -> Vec<StageConfig> {
    vec![
        StageConfig {
            name: "single-sensor".into(),
            select: DatasetSelector {
                sensors: vec!["AVIRIS-NG/L1".into()],
                max_per_sensor: None,
            },
            ..StageConfig::default()
        },
        StageConfig {
            name: "mixed".into(),
            select: DatasetSelector {
                sensors: Vec::new(),
                max_per_sensor: Some(16),
            },
            ..StageConfig::default()
        },
        StageConfig {
            name: "full".into(),
            ..StageConfig::default()
        },
    ]
}

impl TrainConfig {
    /// [`ModelConfig::desk`] with a rate and batch sized for a few hundred
    /// patches.
    pub fn desk() -> Self {
        Self {
            lr_base: 1e-3,
            lr_min: 1e-3 / 15.0,
            batch: 4,
            model: ModelConfig::desk(),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_base) {
            return bad("need 0 ≤ lr_min ≤ lr_base");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) || !(0.0..1.0).contains(&self.sensor_name_dropout) {
            return bad("mask_ratio and sensor_name_dropout must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("need betas in [0, 1) and adam_eps > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch == 0 || self.grad_accum == 0 || self.band_window == 0 || self.band_stride == 0 {
            return bad("batch, grad_accum, band_window and band_stride must be positive");
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required");
        }
        for s in &self.stages {
            if self.stage_epochs(s) == 0 {
                return bad("every stage needs at least one epoch");
            }
        }
        self.loss.validate()?;
        self.model.validate()
    }

    pub fn stage_epochs(&self, s: &StageConfig) -> usize {
        s.epochs.unwrap_or(self.epochs)
    }

    pub fn stage_warmup(&self, s: &StageConfig) -> usize {
        s.warmup_epochs.unwrap_or(self.warmup_epochs)
    }

    pub fn loader(&self) -> LoaderConfig {
        LoaderConfig {
            batch: self.batch,
            window: self.band_window,
            stride: self.band_stride,
            seed: self.seed,
            shard: 0,
            workers: self.workers,
            queue: 4,
            shuffle: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        assert!(TrainConfig::from_toml("lr_bsae = 1.0").is_err());
        assert!(TrainConfig::from_toml("[model.backbone]\npatchsize = 4").is_err());
        let partial = TrainConfig::from_toml("epochs = 3\n[[stages]]\nname = \"only\"\n").unwrap();
        assert_eq!(partial.stages.len(), 1);
        assert_eq!(partial.stage_epochs(&partial.stages[0]), 3);
    }

    #[test]
    fn invariants_enforced() {
        let cfg = TrainConfig {
            lr_min: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            mask_ratio: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            stages: Vec::new(),
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
