//! The single structured run-configuration document used by the CLI.

use std::path::Path;

use crate::augment::AugmentConfig;
use crate::codec::CodecConfig;
use crate::data::SynthConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// One document combining every section; unknown keys are rejected at parse
/// time and a schema version must be present.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub codec: CodecConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::default(),
            codec: CodecConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = toml::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Checks every section invariant plus cross-section consistency; the
    /// returned error names the first violation.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Invalid(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.codec
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.augment.validate().map_err(ConfigError::Invalid)?;
        self.synth.validate().map_err(ConfigError::Invalid)?;
        if self.codec.heatmap_size != self.model.heatmap_size
            || self.codec.output_stride != self.model.output_stride
        {
            return Err(ConfigError::Invalid(format!(
                "codec geometry ({}, stride {}) must match the model ({}, stride {})",
                self.codec.heatmap_size,
                self.codec.output_stride,
                self.model.heatmap_size,
                self.model.output_stride
            )));
        }
        if self.augment.input_size != self.model.input_size {
            return Err(ConfigError::Invalid(format!(
                "augment.input_size {} must match model.input_size {}",
                self.augment.input_size, self.model.input_size
            )));
        }
        if self.train.lr <= 0.0 {
            return Err(ConfigError::Invalid(format!(
                "train.lr must be positive, got {}",
                self.train.lr
            )));
        }
        Ok(())
    }
}
