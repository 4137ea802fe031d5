//! Run configuration shared by every pipeline stage.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::DatasetConfig;
use crate::encoders::EncoderConfig;
use crate::optim::TrainConfig;
use crate::separator::{FinetuneConfig, SeparatorConfig};
use crate::summarizer::SummarizerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Sampled coordinates per stage.
    pub coordinates: usize,
    pub seed: u64,
}

/// Every numeric setting of a run. Flags on the command line only pick
/// files, stages and λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds epoch shuffling in every training stage.
    pub seed: u64,
    /// λ values swept by the finetuning stage.
    pub lambdas: Vec<f64>,
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
    pub summarizer: SummarizerConfig,
    pub separator: SeparatorConfig,
    pub summarizer_training: TrainConfig,
    pub separator_training: TrainConfig,
    pub finetune: FinetuneConfig,
    pub grad_check: GradCheckConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.dataset.validate().map_err(|e| invalid(&e))?;
        self.encoder.validate().map_err(|e| invalid(&e))?;
        self.summarizer.validate().map_err(|e| invalid(&e))?;
        self.separator.validate().map_err(|e| invalid(&e))?;
        self.summarizer_training.validate().map_err(|e| invalid(&e))?;
        self.separator_training.validate().map_err(|e| invalid(&e))?;
        self.finetune.validate().map_err(|e| invalid(&e))?;
        if self.lambdas.is_empty() {
            return Err(ConfigError::Invalid("lambdas must not be empty".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(ConfigError::Invalid(format!("lambda {l} is not a finite non-negative number")));
        }
        if self.dataset.num_sources != self.separator.num_sources {
            return Err(ConfigError::Invalid(format!(
                "dataset has {} sources but the separator produces {}",
                self.dataset.num_sources, self.separator.num_sources
            )));
        }
        if self.grad_check.coordinates == 0 {
            return Err(ConfigError::Invalid("grad_check.coordinates must be at least 1".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical serialization, so
    /// formatting and comments do not change it.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = include_str!("../../../configs/smoke.toml");

    #[test]
    fn smoke_config_parses_and_round_trips() {
        let cfg = RunConfig::from_toml(EXAMPLE).unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn hash_tracks_values_not_formatting() {
        let cfg = RunConfig::from_toml(EXAMPLE).unwrap();
        let spaced = format!("# comment\n\n{}", EXAMPLE.replace(" = ", "   =   "));
        assert_eq!(RunConfig::from_toml(&spaced).unwrap().hash(), cfg.hash());
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn rejects_unknown_and_missing_keys() {
        let extra = format!("bogus = 1\n{EXAMPLE}");
        assert!(matches!(RunConfig::from_toml(&extra), Err(ConfigError::Parse(_))));
        let missing = EXAMPLE.replacen("seed = ", "# seed = ", 1);
        assert!(matches!(RunConfig::from_toml(&missing), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn rejects_inconsistent_values() {
        let mut cfg = RunConfig::from_toml(EXAMPLE).unwrap();
        cfg.separator.num_sources = 3;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
        let mut cfg = RunConfig::from_toml(EXAMPLE).unwrap();
        cfg.lambdas.push(f64::NAN);
        assert!(cfg.validate().is_err());
    }
}
