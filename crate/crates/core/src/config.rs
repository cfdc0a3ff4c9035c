//! Run configuration, read from TOML.
//!
//! Every section is optional; missing keys take their defaults. The config
//! hash is the SHA-256 of the canonical TOML re-serialisation (without
//! `paths`), so two files that differ only in layout or comments hash
//! identically.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ase::AseConfig;
use crate::data::GeneratorConfig;
use crate::error::{io_err, Result, TasError};
use crate::objectives::LossConfig;
use crate::vfe::VfeConfig;

/// Where the segmentation network's input features come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    /// Train the clip encoder first and use its frame features.
    Vfe,
    /// Use the dataset's features directly.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            checkpoints: "runs/checkpoints".into(),
            output: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Train and predict on every `sample_rate`-th frame; predictions are
    /// repeated back to full rate.
    pub sample_rate: usize,
    pub schedule: Schedule,
}

/// Per-epoch learning-rate schedule of the segmentation phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Half-cosine from the base rate towards zero over `epochs`.
    Cosine,
}

impl TrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let progress = epoch as f64 / self.epochs.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 5e-4,
            weight_decay: 1e-5,
            sample_rate: 1,
            schedule: Schedule::Cosine,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub folds: usize,
    pub features: FeatureSource,
    pub paths: Paths,
    pub generator: GeneratorConfig,
    pub vfe: VfeConfig,
    pub ase: AseConfig,
    /// Boundary branch; same architecture with one output.
    pub prc: AseConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            folds: 4,
            features: FeatureSource::Vfe,
            paths: Paths::default(),
            generator: GeneratorConfig::default(),
            vfe: VfeConfig::default(),
            ase: AseConfig::default(),
            prc: AseConfig {
                width: 32,
                ..AseConfig::default()
            },
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| TasError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|e| match e {
            TasError::Config(msg) => TasError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(TasError::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.train.sample_rate == 0 {
            return Err(TasError::Config("train.sample_rate must be positive".into()));
        }
        self.generator.validate()?;
        self.vfe.validate()?;
        self.ase.validate()?;
        self.prc.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    /// Identity of a run. Paths are left out, so moving a run elsewhere
    /// keeps its hash.
    pub fn hash(&self) -> String {
        let canonical = Self {
            paths: Paths::default(),
            ..self.clone()
        };
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }
}
