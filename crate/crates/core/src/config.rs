//! Run configuration, loaded from TOML (or JSON by extension).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::FeatureParams;
use crate::forest::ForestConfig;
use crate::fusion::{FusionError, FusionWeights};
use crate::gcn::GcnTrainConfig;
use crate::ingestion::Schema;
use crate::labeling::AttackSpec;
use crate::lstm_ae::LstmAeConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid TOML config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid JSON config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Fusion(#[from] FusionError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: PathBuf,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Master seed; every stage derives its own sub-seed from it.
    pub seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Share of each state's training records held out for threshold calibration.
    #[serde(default = "default_calibration_fraction")]
    pub calibration_fraction: f64,
    #[serde(default)]
    pub schema: Schema,
    /// Synthetic theft injection; omit when the input already carries labels.
    #[serde(default)]
    pub attack: Option<AttackSpec>,
    #[serde(default)]
    pub features: FeatureParams,
    #[serde(default = "default_lstm")]
    pub lstm: LstmAeConfig,
    #[serde(default)]
    pub gcn: GcnTrainConfig,
    #[serde(default)]
    pub forest: ForestConfig,
    #[serde(default)]
    pub fusion: FusionWeights,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_test_fraction() -> f64 {
    0.3
}

fn default_calibration_fraction() -> f64 {
    0.2
}

/// Autoencoder settings for pipeline runs: mini-batches and a capped,
/// evenly spaced training set keep desk-scale runs within minutes.
pub fn default_lstm() -> LstmAeConfig {
    LstmAeConfig {
        epochs: 30,
        batch_size: 64,
        max_train_windows: 1024,
        train_stride: 2,
        lr: 5e-3,
        ..LstmAeConfig::default()
    }
}

impl PipelineConfig {
    /// Minimal config around an input file, everything else at defaults.
    pub fn new(input: impl Into<PathBuf>, output_dir: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            input: input.into(),
            output_dir: output_dir.into(),
            seed,
            test_fraction: default_test_fraction(),
            calibration_fraction: default_calibration_fraction(),
            schema: Schema::default(),
            attack: None,
            features: FeatureParams::default(),
            lstm: default_lstm(),
            gcn: GcnTrainConfig::default(),
            forest: ForestConfig::default(),
            fusion: FusionWeights::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Parses by extension and resolves relative paths against the config's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text)?,
            _ => Self::from_toml(&text)?,
        };
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.input.is_relative() {
            cfg.input = base.join(&cfg.input);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every stage's settings so bad configs fail before any training.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.fusion.validate()?;
        for (name, f) in [
            ("test_fraction", self.test_fraction),
            ("calibration_fraction", self.calibration_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(ConfigError::Invalid(format!("{name} must lie in (0, 1), got {f}")));
            }
        }
        if let Some(a) = &self.attack {
            a.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        let p = &self.features;
        if p.rolling_window == 0 {
            return Err(ConfigError::Invalid("features.rolling_window must be at least 1".into()));
        }
        if !(p.epsilon > 0.0) || !(0.0..=1.0).contains(&p.winsor_quantile) || !(p.line_resistance >= 0.0) {
            return Err(ConfigError::Invalid(
                "features need epsilon > 0, winsor_quantile in [0, 1] and line_resistance >= 0".into(),
            ));
        }
        let l = &self.lstm;
        if l.window < 2 || l.hidden == 0 || l.latent == 0 || l.epochs == 0 || l.train_stride == 0 || !(l.lr > 0.0) {
            return Err(ConfigError::Invalid(
                "lstm needs window >= 2, positive hidden/latent/epochs/train_stride and lr > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&l.threshold_quantile) {
            return Err(ConfigError::Invalid("lstm.threshold_quantile must lie in [0, 1]".into()));
        }
        self.gcn.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.forest.n_trees == 0 || self.forest.max_features == Some(0) {
            return Err(ConfigError::Invalid("forest needs n_trees >= 1 and max_features >= 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, excluding filesystem locations.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("input");
            m.remove("output_dir");
        }
        hex(&Sha256::digest(v.to_string().as_bytes()))
    }

    /// Stage sub-seed: first 8 bytes of SHA-256(seed ‖ stage name).
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(stage.as_bytes());
        u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
