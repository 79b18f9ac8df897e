use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{SpecConfig, SpecType};
use crate::error::{Error, Result};
use crate::eval::AveragingMode;
use crate::optim::{OptimizerConfig, OptimizerKind, Schedule};
use crate::zoo::{ModelClass, ModelKind};

/// How batch-norm layers obtain their evaluation statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnStatsMode {
    /// Exact mean/variance over the whole training set after every epoch.
    #[default]
    Finalize,
    /// Exponential moving average of batch statistics during training.
    RunningAverage,
}

fn default_epochs() -> u32 {
    100
}
fn default_batch_size() -> usize {
    crate::data::DEFAULT_BATCH_SIZE
}
fn default_bn_momentum() -> f64 {
    0.1
}
fn default_patience() -> u32 {
    5
}
fn default_min_delta() -> f64 {
    1e-4
}
fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub l1: f64,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub bn_stats: BnStatsMode,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default)]
    pub averaging: AveragingMode,
    /// Epochs without a validation-F1 gain of at least `plateau_min_delta`
    /// that count as a plateau.
    #[serde(default = "default_patience")]
    pub plateau_patience: u32,
    #[serde(default = "default_min_delta")]
    pub plateau_min_delta: f64,
    /// End the run once a plateau is detected.
    #[serde(default)]
    pub stop_on_plateau: bool,
    /// Folds trained concurrently.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            l1: 0.0,
            l2: 0.0,
            seed: 0,
            bn_stats: BnStatsMode::default(),
            bn_momentum: default_bn_momentum(),
            averaging: AveragingMode::default(),
            plateau_patience: default_patience(),
            plateau_min_delta: default_min_delta(),
            stop_on_plateau: false,
            workers: default_workers(),
        }
    }
}

/// A complete, self-contained description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub representation: SpecConfig,
    pub model: ModelClass,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub train: TrainSection,
}

impl TrainConfig {
    /// The settled recipe for a model class: momentum 0.9 with α = 0.1 (DNN,
    /// ConvNet) or 1.0 (AllConv) and halving every 10 (5 for ConvNet) epochs,
    /// on the LM representation at 44.1 kHz.
    pub fn recipe(kind: ModelKind) -> Self {
        let representation = SpecConfig::new(SpecType::LM, 44_100);
        let (lr, period) = match kind {
            ModelKind::ConvNet => (0.1, 5),
            ModelKind::AllConv => (1.0, 10),
            _ => (0.1, 10),
        };
        Self {
            model: ModelClass::new(kind, 229),
            representation,
            optimizer: OptimizerConfig::new(OptimizerKind::Momentum, lr).with_momentum(0.9),
            schedule: Schedule::step_multiply(0.5, period),
            train: TrainSection::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.representation.validate()?;
        self.model.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if t.l1 < 0.0 || t.l2 < 0.0 || !t.l1.is_finite() || !t.l2.is_finite() {
            return Err(Error::Config("penalty weights must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&t.bn_momentum) {
            return Err(Error::Config("bn_momentum must be in [0, 1]".into()));
        }
        if t.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if t.plateau_patience == 0 {
            return Err(Error::Config("plateau_patience must be at least 1".into()));
        }
        Ok(())
    }

    /// Content hash that names the run's output directory.
    pub fn config_hash(&self) -> String {
        crate::io::content_hash(self)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = crate::io::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::format(path, msg),
            other => other,
        })
    }
}
