//! One JSON document describing a whole run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::CurriculumConfig;
use crate::models::Arch;
use crate::noisy_eval::Thresholds;
use crate::synthgen::SynthConfig;
use crate::trainer::{self, default_lr, ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Dataset directory holding `manifest.json`.
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judgments: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            run_dir: "runs/default".into(),
            judgments: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub curriculum: CurriculumConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub thresholds: Thresholds,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            curriculum: CurriculumConfig::default(),
            train: TrainConfig::for_arch(Arch::UnetRes),
            model: ModelConfig::default(),
            thresholds: Thresholds::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

impl RunConfig {
    /// Parses a config document. An absent `train.lr_init` takes the
    /// architecture's default rate.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let lr_given = value.pointer("/train/lr_init").is_some();
        let mut config: RunConfig = serde_json::from_value(value)?;
        if !lr_given {
            config.train.lr_init = default_lr(config.model.arch);
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable config");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_json()).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Sets every seed in the document.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.curriculum.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.synth
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("synth: {e}")))?;
        trainer::validate(&self.curriculum, &self.train, &self.model).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.thresholds
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("thresholds: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn transformer_gets_its_own_rate() {
        let c = RunConfig::from_json(r#"{"model": {"arch": "TRANSFORMER_SEG"}}"#).unwrap();
        assert_eq!(c.train.lr_init, 6e-5);
        let c = RunConfig::from_json(r#"{"model": {"arch": "TRANSFORMER_SEG"}, "train": {"lr_init": 0.01}}"#).unwrap();
        assert_eq!(c.train.lr_init, 0.01);
    }

    #[test]
    fn cross_field_errors_name_the_field() {
        let c = RunConfig::from_json(r#"{"curriculum": {"m": 10, "n": 200}}"#).unwrap();
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("curriculum.n"), "{msg}");
        let c = RunConfig::from_json(r#"{"curriculum": {"m": 50, "n": 20}}"#).unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("m = 50"));
        let c = RunConfig::from_json(r#"{"thresholds": {"cloud_as_snow": 2.0, "omission": 0.05, "false_detection": 0.05}}"#)
            .unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("cloud_as_snow"));
    }

    #[test]
    fn round_trip_and_seed_override() {
        let mut c = RunConfig::default();
        c.set_seed(7);
        assert_eq!((c.synth.seed, c.curriculum.seed, c.train.seed), (7, 7, 7));
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
