//! Run configuration: one JSON document covering data generation, model,
//! objective, smoothing, decoding, optimization and output paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::decode::DecodeConfig;
use crate::embed::SmoothingConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{Architecture, MatRegPair, ModelConfig};

/// Which P2M output positions receive a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum P2mTargets {
    /// Every position: unmasked Pinyin is translated at inference too.
    #[default]
    All,
    /// Only the randomly masked positions, like the CMLM.
    Masked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugmentConfig {
    pub time_masks: usize,
    pub time_width: usize,
    pub freq_masks: usize,
    pub freq_width: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self { time_masks: 1, time_width: 4, freq_masks: 1, freq_width: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub spec_augment: SpecAugmentConfig,
    pub p2m_targets: P2mTargets,
    /// MatReg pairs; `None` picks the architecture default.
    pub matreg_pairs: Option<Vec<MatRegPair>>,
    /// Leading fraction of the training manifest to use.
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            warmup_steps: 200,
            batch_size: 16,
            epochs: 20,
            grad_clip: 5.0,
            spec_augment: SpecAugmentConfig::default(),
            p2m_targets: P2mTargets::All,
            matreg_pairs: None,
            train_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!("train_fraction {} outside (0, 1]", self.train_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Corpus directory written by data generation.
    pub data_dir: PathBuf,
    /// Checkpoints and training log.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data_dir: PathBuf::from("data"), out_dir: PathBuf::from("run") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for model initialization, masking, dropout and batching.
    pub seed: u64,
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub smoothing: SmoothingConfig,
    pub decode: DecodeConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let decode = DecodeConfig { architecture: model.architecture, ..DecodeConfig::default() };
        Self {
            seed: 0,
            data: SynthConfig::default(),
            model,
            loss: LossConfig::default(),
            smoothing: SmoothingConfig::default(),
            decode,
            train: TrainConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates. The decode architecture always follows the model's.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.decode.architecture = cfg.model.architecture;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Overrides every seed in the document.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
    }

    pub fn set_architecture(&mut self, arch: Architecture) {
        self.model.architecture = arch;
        self.decode.architecture = arch;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.smoothing.validate()?;
        self.decode.validate()?;
        self.train.validate()?;
        if self.model.encoder.input_dim != self.data.feat_dim {
            return Err(Error::Config(format!(
                "model.encoder.input_dim ({}) must equal data.feat_dim ({})",
                self.model.encoder.input_dim, self.data.feat_dim
            )));
        }
        if self.decode.architecture != self.model.architecture {
            return Err(Error::Config("decode.architecture must match model.architecture".into()));
        }
        if self.smoothing.epsilon != self.loss.epsilon {
            return Err(Error::Config(format!(
                "smoothing.epsilon ({}) must equal loss.epsilon ({})",
                self.smoothing.epsilon, self.loss.epsilon
            )));
        }
        if let Some(pairs) = &self.train.matreg_pairs {
            for p in pairs {
                let ok = match p {
                    MatRegPair::CtcCmlm => {
                        self.model.architecture == Architecture::MaskCtc && !self.model.tie_ctc_embedding
                    }
                    MatRegPair::P2mCmlm => self.model.architecture.has_p2m(),
                };
                if !ok {
                    return Err(Error::Config(format!(
                        "MatReg pair {p:?} is not defined for {}",
                        self.model.architecture
                    )));
                }
            }
        }
        Ok(())
    }
}
