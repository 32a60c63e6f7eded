//! Experiment configuration, read from TOML and overridable from the CLI.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{FusionWeight, DEFAULT_K};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_CUTOFFS;
use crate::model::DEFAULT_INIT_STD;
use crate::trainer::TrainConfig;

fn default_folds() -> usize {
    5
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_cutoffs() -> Vec<usize> {
    DEFAULT_CUTOFFS.to_vec()
}

fn default_init_std() -> f64 {
    DEFAULT_INIT_STD
}

fn default_true() -> bool {
    true
}

/// ```toml
/// bundle = "data/synth.cirb"
/// output_dir = "runs/cv"
/// seed = 7
/// beta = 0.6
///
/// [train]
/// learning_rate = 1e-4
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub bundle: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub beta: FusionWeight,
    #[serde(default = "default_cutoffs")]
    pub cutoffs: Vec<usize>,
    #[serde(default = "default_true")]
    pub exclude_self: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Run folds concurrently. Results do not depend on this.
    #[serde(default)]
    pub parallel_folds: bool,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn new(bundle: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            bundle: bundle.into(),
            output_dir: output_dir.into(),
            seed: 0,
            folds: default_folds(),
            k: DEFAULT_K,
            beta: FusionWeight::default(),
            cutoffs: default_cutoffs(),
            exclude_self: true,
            init_std: DEFAULT_INIT_STD,
            parallel_folds: false,
            train: TrainConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    /// Read a TOML file; relative paths inside resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(dir) = path.parent() {
            if cfg.bundle.is_relative() {
                cfg.bundle = dir.join(&cfg.bundle);
            }
            if cfg.output_dir.is_relative() {
                cfg.output_dir = dir.join(&cfg.output_dir);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Settings that do not touch the filesystem.
    pub fn validate_settings(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::config(format!("folds = {}: need at least 2", self.folds)));
        }
        if self.k == 0 {
            return Err(Error::config("k must be positive"));
        }
        if self.cutoffs.is_empty() {
            return Err(Error::config("at least one Acc@K cutoff is required"));
        }
        if self.cutoffs[0] == 0 || self.cutoffs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "cutoffs {:?} must be positive and strictly ascending",
                self.cutoffs
            )));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("init_std must be finite and non-negative"));
        }
        self.train_config().validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_settings()?;
        if !self.bundle.is_file() {
            return Err(Error::config(format!("bundle {} does not exist", self.bundle.display())));
        }
        Ok(())
    }

    /// The trainer settings with experiment-wide seed and fusion weight.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            beta: self.beta,
            ..self.train.clone()
        }
    }

    /// SHA-256 of the canonical JSON form (keys sorted).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let json = serde_json::to_vec(&value).expect("value serializes");
        hex::encode(Sha256::digest(&json))
    }
}
