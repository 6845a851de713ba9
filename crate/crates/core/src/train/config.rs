use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::BlockKind;
use crate::data::AugmentPolicy;
use crate::encoders::{FreezePolicy, ModelConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;

use super::optim::{AdamWHyper, Schedule};

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub adam: AdamWHyper,
    pub lambdas: LossWeights,
    /// Training manifest (file or directory).
    pub train_manifest: PathBuf,
    /// Held-out manifest for retrieval evaluation.
    pub eval_manifest: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub model: ModelConfig,
    pub freeze_policy: FreezePolicy,
    pub use_kd: bool,
    pub use_pm: bool,
    pub use_wi: bool,
    pub ic_include_positive: bool,
    /// Steps between evaluations; 0 evaluates only after the last step.
    pub eval_every: usize,
    pub augment: AugmentPolicy,
    /// Data-loading threads; 1 is the deterministic single-threaded mode.
    pub loader_workers: usize,
    /// Lower bound on the learned temperature.
    pub min_tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 20,
            batch_size: 64,
            lr_peak: 2e-3,
            weight_decay: 0.1,
            warmup_steps: 200,
            schedule: Schedule::Cosine,
            adam: AdamWHyper::default(),
            lambdas: LossWeights::default(),
            train_manifest: PathBuf::from("data/train"),
            eval_manifest: Some(PathBuf::from("data/eval")),
            teacher: None,
            model: ModelConfig::default(),
            freeze_policy: FreezePolicy::InheritedFrozen,
            use_kd: false,
            use_pm: false,
            use_wi: false,
            ic_include_positive: false,
            eval_every: 0,
            augment: AugmentPolicy::disabled(),
            loader_workers: 1,
            min_tau: 0.01,
        }
    }
}

impl TrainConfig {
    /// Full-scale hyperparameters: batch 1536, lr 1e-3, wd 0.1, 10k warmup
    /// steps, 32 epochs, standard loss weights and full augmentation.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 32,
            batch_size: 1536,
            lr_peak: 1e-3,
            weight_decay: 0.1,
            warmup_steps: 10_000,
            lambdas: LossWeights::default(),
            augment: AugmentPolicy::default(),
            use_kd: true,
            use_pm: true,
            use_wi: true,
            ..Default::default()
        }
    }

    /// Contrastive-only Pre-LN model trained for 50 epochs.
    pub fn teacher_default() -> Self {
        TrainConfig {
            epochs: 50,
            model: ModelConfig {
                block_kind: BlockKind::Preln,
                ..Default::default()
            },
            freeze_policy: FreezePolicy::AllTrainable,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.lr_peak >= 0.0) || !(self.weight_decay >= 0.0) || !(self.min_tau > 0.0) {
            return Err(Error::Config("lr_peak, weight_decay must be >= 0 and min_tau > 0".into()));
        }
        if self.loader_workers == 0 {
            return Err(Error::Config("loader_workers must be >= 1".into()));
        }
        self.lambdas.validate()?;
        self.augment.validate()?;
        self.model.validate()?;
        if (self.use_kd || self.use_wi) && self.teacher.is_none() {
            return Err(Error::Config("use_kd / use_wi need a teacher checkpoint".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn loader_mode(&self) -> String {
        if self.loader_workers == 1 {
            "single".into()
        } else {
            format!("workers{}", self.loader_workers)
        }
    }
}
