//! In-memory labelled corpus with fold assignment.

use crate::audio_io::{self, DatasetManifest, ManifestEntry, WaveSample, CANONICAL_RATE};
use crate::error::{Error, Result};

/// Peak-normalized clips at a common sample rate, each tagged with its
/// 1-based fold.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub waves: Vec<WaveSample>,
    pub folds: Vec<usize>,
    pub categories: Vec<String>,
    pub num_classes: usize,
    pub num_folds: usize,
    pub sample_rate: u32,
}

impl Dataset {
    /// Pairs clips with manifest entries (same order), resampling to
    /// `sample_rate` and peak-normalizing each clip.
    pub fn from_waves(waves: Vec<WaveSample>, manifest: &DatasetManifest, sample_rate: u32) -> Result<Self> {
        if waves.len() != manifest.entries.len() {
            return Err(Error::Data(format!("{} clips for {} manifest entries", waves.len(), manifest.entries.len())));
        }
        let waves = waves
            .into_iter()
            .zip(&manifest.entries)
            .map(|(mut w, e)| {
                w.label = e.label;
                let w = audio_io::resample_linear(&w, sample_rate)?;
                Ok(audio_io::normalize(&w))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            waves,
            folds: manifest.entries.iter().map(|e| e.fold).collect(),
            categories: manifest.entries.iter().map(|e| e.category.clone()).collect(),
            num_classes: manifest.num_classes,
            num_folds: manifest.num_folds,
            sample_rate,
        })
    }

    /// Loads every clip named in the manifest at the canonical rate.
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        Self::load_at(manifest, CANONICAL_RATE)
    }

    pub fn load_at(manifest: &DatasetManifest, sample_rate: u32) -> Result<Self> {
        let waves = manifest
            .entries
            .iter()
            .map(|e| {
                let mut w = audio_io::load_wav(manifest.path_of(e))?;
                w.source_id = e.filename.clone();
                Ok(w)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_waves(waves, manifest, sample_rate)
    }

    pub fn len(&self) -> usize {
        self.waves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waves.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.waves.iter().map(|w| w.label).collect()
    }

    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    /// Indices of every clip outside `fold`, and of the clips in it.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| self.folds[i] != fold)
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            entries: self
                .waves
                .iter()
                .zip(&self.folds)
                .zip(&self.categories)
                .map(|((w, &fold), cat)| ManifestEntry {
                    filename: w.source_id.clone(),
                    fold,
                    label: w.label,
                    category: cat.clone(),
                })
                .collect(),
            num_classes: self.num_classes,
            num_folds: self.num_folds,
            audio_root: Default::default(),
        }
    }
}
