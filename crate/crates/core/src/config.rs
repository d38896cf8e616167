//! Run configuration: one JSON document with a section per component.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio_io::{self, CANONICAL_RATE};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::synth::{self, SynthSpec};
use crate::trainer::TrainConfig;

/// Where clips come from: a metadata CSV or the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Manifest {
        path: PathBuf,
        #[serde(default)]
        audio_root: Option<PathBuf>,
        /// Rate every clip is resampled to.
        #[serde(default = "canonical_rate")]
        sample_rate: u32,
    },
    Synthetic(SynthSpec),
}

fn canonical_rate() -> u32 {
    CANONICAL_RATE
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SynthSpec::default())
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Manifest { path, audio_root, sample_rate } => {
                let manifest = audio_io::load_manifest(path, audio_root.as_deref())?;
                Dataset::load_at(&manifest, *sample_rate)
            }
            DatasetSource::Synthetic(spec) => synth::generate(spec),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub train: TrainConfig,
    /// Validation fold for a single split; `None` cross-validates over
    /// every fold.
    pub val_fold: Option<usize>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            train: TrainConfig::default(),
            val_fold: None,
            out: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
        }
        if self.val_fold == Some(0) {
            return Err(Error::Config("val_fold is 1-based".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_take_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"loss": {"alpha": 0.25}}, "val_fold": 2}"#).unwrap();
        assert_eq!(cfg.train.loss.alpha, 0.25);
        assert_eq!(cfg.train.epochs, TrainConfig::default().epochs);
        assert_eq!(cfg.val_fold, Some(2));
    }

    #[test]
    fn manifest_source_parses() {
        let cfg = RunConfig::from_json(r#"{"dataset": {"manifest": {"path": "meta/esc50.csv"}}}"#).unwrap();
        match cfg.dataset {
            DatasetSource::Manifest { path, sample_rate, .. } => {
                assert_eq!(path, PathBuf::from("meta/esc50.csv"));
                assert_eq!(sample_rate, CANONICAL_RATE);
            }
            other => panic!("unexpected source {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = RunConfig::from_json(r#"{"trian": {}}"#).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
