//! The experiment configuration: a single TOML document wiring every stage
//! together, with a canonical serialization that backs the config hash.
//!
//! One root seed governs the whole run; every stage (channel draw, dataset
//! assembly, model inits, training shuffles) derives its own stream from it,
//! so two runs with equal configs are bit-identical end to end.

use crate::chanest::FeatureConfig;
use crate::dataset::BuildConfig;
use crate::models::{DcnnConfig, McmConfig, TrainConfig};
use crate::nn::AdamConfig;
use crate::seeds;
use crate::sim::{BandLengths, ChannelConfig};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(String),
    #[error("config does not parse: {0}")]
    Parse(String),
    #[error("config is invalid: {0}")]
    Invalid(String),
}

/// Stage labels for seed derivation.
pub mod stage {
    pub const CHANNEL: u64 = 0xA1;
    pub const DATASET: u64 = 0xA2;
    pub const DCNN_INIT: u64 = 0xA3;
    pub const MCM_INIT: u64 = 0xA4;
    pub const TRAIN: u64 = 0xA5;
}

/// `snr_db = 20.0` for a noisy run, `snr_db = "none"` to disable noise.
mod snr_serde {
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(db) => s.serialize_f64(*db),
            None => s.serialize_str("none"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Db(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Db(v) => Ok(Some(v)),
            Raw::Text(t) if t.eq_ignore_ascii_case("none") => Ok(None),
            Raw::Text(t) => Err(D::Error::custom(format!(
                "snr_db must be a number or \"none\", got {t:?}"
            ))),
        }
    }
}

/// Dataset-scale knobs that are not part of feature extraction.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub snapshots_per_test: usize,
    /// Sounding window length in periods of the longest sequence.
    pub repeats: usize,
    /// Shuffle labels across train/val groups (control experiments only).
    pub permute_train_labels: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { snapshots_per_test: 8, repeats: 3, permute_train_labels: false }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root seed for the entire run.
    pub seed: u64,
    /// Receiver noise level; `"none"` disables noise.
    #[serde(with = "snr_serde")]
    pub snr_db: Option<f64>,
    pub bands: BandLengths,
    pub channel: ChannelConfig,
    pub dataset: DatasetSection,
    pub feature: FeatureConfig,
    pub dcnn: DcnnConfig,
    pub mcm: McmConfig,
    /// The `seed` key inside this section is ignored; the root seed above
    /// derives the training stream.
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            snr_db: Some(20.0),
            bands: BandLengths::default(),
            channel: ChannelConfig::default(),
            dataset: DatasetSection::default(),
            feature: FeatureConfig::default(),
            dcnn: DcnnConfig::default(),
            mcm: McmConfig::default(),
            // Smaller batches and a gentler learning rate than the module
            // default: more updates per epoch converge both architectures
            // well inside the epoch cap on a single core.
            train: TrainConfig {
                batch_size: 64,
                max_epochs: 40,
                adam: AdamConfig { lr: 3e-4, ..AdamConfig::default() },
                ..TrainConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.channel.validate().map_err(|e| invalid(&e))?;
        self.feature.validate().map_err(|e| invalid(&e))?;
        self.dcnn.validate().map_err(|e| invalid(&e))?;
        self.mcm.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        if self.dataset.snapshots_per_test == 0 || self.dataset.repeats == 0 {
            return Err(ConfigError::Invalid(
                "snapshots_per_test and repeats must be >= 1".into(),
            ));
        }
        for (name, planes, len) in [
            ("dcnn", self.dcnn.input_planes, self.dcnn.input_len),
            ("mcm", self.mcm.input_planes, self.mcm.input_len),
        ] {
            if planes != self.feature.n_planes() || len != self.feature.plane_len() {
                return Err(ConfigError::Invalid(format!(
                    "{name} input {planes}x{len} does not match features {}x{}",
                    self.feature.n_planes(),
                    self.feature.plane_len()
                )));
            }
        }
        Ok(())
    }

    /// Normalized serialization: independent of the formatting of the file
    /// the config was loaded from.
    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical text; changes iff a field changes.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn stage_seed(&self, tag: u64) -> u64 {
        seeds::derive(self.seed, &[tag])
    }

    /// The dataset assembly config this experiment implies.
    pub fn build_config(&self) -> BuildConfig {
        BuildConfig {
            snapshots_per_test: self.dataset.snapshots_per_test,
            repeats: self.dataset.repeats,
            snr_db: self.snr_db,
            seed: self.stage_seed(stage::DATASET),
            feature: self.feature.clone(),
            drift_per_snapshot: self.channel.drift_per_snapshot,
            permute_train_labels: self.dataset.permute_train_labels,
        }
    }

    /// Training config with the derived seed substituted in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.stage_seed(stage::TRAIN), ..self.train }
    }
}
