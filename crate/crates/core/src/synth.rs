//! Deterministic synthetic sound corpus: tones, chords, chirps and
//! band-limited noise with per-clip jitter, split into class-balanced folds.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio_io::{write_wav, DatasetManifest, ManifestEntry, WaveSample};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Number of random partials summed for a noise band.
const NOISE_PARTIALS: usize = 96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    Tone { freq: f64 },
    Chord { freqs: Vec<f64> },
    Chirp { start: f64, end: f64 },
    NoiseBand { low: f64, high: f64 },
}

impl Generator {
    pub fn name(&self) -> String {
        match self {
            Generator::Tone { freq } => format!("tone_{freq}"),
            Generator::Chord { freqs } => {
                let parts: Vec<String> = freqs.iter().map(|f| f.to_string()).collect();
                format!("chord_{}", parts.join("_"))
            }
            Generator::Chirp { start, end } => format!("chirp_{start}_{end}"),
            Generator::NoiseBand { low, high } => format!("noise_{low}_{high}"),
        }
    }

    fn max_freq(&self) -> f64 {
        match self {
            Generator::Tone { freq } => *freq,
            Generator::Chord { freqs } => freqs.iter().cloned().fold(0.0, f64::max),
            Generator::Chirp { start, end } => start.max(*end),
            Generator::NoiseBand { high, .. } => *high,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: Vec<Generator>,
    pub samples_per_class: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    pub folds: usize,
    pub seed: u64,
    /// Relative frequency jitter, applied as a factor in `[1 − j, 1 + j]`.
    pub freq_jitter: f64,
    pub amp_min: f64,
    pub amp_max: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: vec![
                Generator::Tone { freq: 440.0 },
                Generator::Chord { freqs: vec![880.0, 1320.0] },
                Generator::Chirp { start: 200.0, end: 2000.0 },
                Generator::NoiseBand { low: 3000.0, high: 6000.0 },
            ],
            samples_per_class: 40,
            clip_seconds: 2.0,
            sample_rate: 22_050,
            folds: 4,
            seed: 0,
            freq_jitter: 0.05,
            amp_min: 0.5,
            amp_max: 1.0,
        }
    }
}

impl SynthSpec {
    pub fn clip_len(&self) -> usize {
        (self.clip_seconds * f64::from(self.sample_rate)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.folds == 0 || self.clip_len() == 0 {
            return Err(Error::Config("synthetic spec needs classes, folds and a positive clip length".into()));
        }
        if self.samples_per_class < self.folds {
            return Err(Error::Config(format!(
                "samples_per_class {} is below the fold count {}",
                self.samples_per_class, self.folds
            )));
        }
        if !(0.0 < self.amp_min && self.amp_min <= self.amp_max && self.amp_max <= 1.0) {
            return Err(Error::Config("need 0 < amp_min <= amp_max <= 1".into()));
        }
        if !(0.0..1.0).contains(&self.freq_jitter) {
            return Err(Error::Config("freq_jitter must lie in [0, 1)".into()));
        }
        let nyquist = f64::from(self.sample_rate) / 2.0;
        for g in &self.classes {
            let top = g.max_freq() * (1.0 + self.freq_jitter);
            if top >= nyquist {
                return Err(Error::Config(format!(
                    "{} reaches {top} Hz, at or above the {nyquist} Hz Nyquist limit",
                    g.name()
                )));
            }
        }
        Ok(())
    }
}

fn render(g: &Generator, spec: &SynthSpec, rng: &mut rng::Stream) -> Vec<f64> {
    let n = spec.clip_len();
    let sr = f64::from(spec.sample_rate);
    let j = spec.freq_jitter;
    let jitter = if j > 0.0 { rng.random_range(1.0 - j..=1.0 + j) } else { 1.0 };
    let amp = if spec.amp_min < spec.amp_max { rng.random_range(spec.amp_min..=spec.amp_max) } else { spec.amp_min };
    let mut phase = || rng.random_range(0.0..2.0 * PI);
    let mut out: Vec<f64> = match g {
        Generator::Tone { freq } => {
            let (f, p) = (freq * jitter, phase());
            (0..n).map(|i| (2.0 * PI * f * i as f64 / sr + p).sin()).collect()
        }
        Generator::Chord { freqs } => {
            let parts: Vec<(f64, f64)> = freqs.iter().map(|f| (f * jitter, phase())).collect();
            (0..n).map(|i| parts.iter().map(|(f, p)| (2.0 * PI * f * i as f64 / sr + p).sin()).sum()).collect()
        }
        Generator::Chirp { start, end } => {
            let (f0, f1, p) = (start * jitter, end * jitter, phase());
            let dur = n as f64 / sr;
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    (2.0 * PI * (f0 * t + 0.5 * (f1 - f0) * t * t / dur) + p).sin()
                })
                .collect()
        }
        Generator::NoiseBand { low, high } => {
            let (lo, hi) = (low * jitter, high * jitter);
            let partials: Vec<(f64, f64)> =
                (0..NOISE_PARTIALS).map(|_| (rng.random_range(lo..hi), rng.random_range(0.0..2.0 * PI))).collect();
            (0..n).map(|i| partials.iter().map(|(f, p)| (2.0 * PI * f * i as f64 / sr + p).sin()).sum()).collect()
        }
    };
    let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        let s = amp / peak;
        for v in &mut out {
            *v *= s;
        }
    }
    out
}

/// Generates the corpus. Clip `k` of each class goes to fold `k mod K + 1`.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut waves = Vec::with_capacity(spec.classes.len() * spec.samples_per_class);
    let mut entries = Vec::with_capacity(waves.capacity());
    for (label, g) in spec.classes.iter().enumerate() {
        for k in 0..spec.samples_per_class {
            let mut rng = rng::stream(spec.seed, Purpose::Synth, label as u64, k as u64);
            let filename = format!("synth_c{label}_{k:03}.wav");
            waves.push(WaveSample::new(render(g, spec, &mut rng), spec.sample_rate, label, filename.clone()));
            entries.push(ManifestEntry { filename, fold: k % spec.folds + 1, label, category: g.name() });
        }
    }
    let manifest = DatasetManifest::from_entries(entries, Default::default())?;
    Dataset::from_waves(waves, &manifest, spec.sample_rate)
}

/// Writes every clip as a WAV file plus `meta.csv` into `dir`.
pub fn dump(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for w in &dataset.waves {
        write_wav(dir.join(&w.source_id), w)?;
    }
    let mut manifest = dataset.manifest();
    manifest.audio_root = dir.to_path_buf();
    manifest.write_csv(dir.join("meta.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_corpus_counts() {
        let d = generate(&SynthSpec::default()).unwrap();
        assert_eq!(d.len(), 160);
        assert_eq!((d.num_classes, d.num_folds), (4, 4));
        for fold in 1..=4 {
            let idx = d.fold_indices(fold);
            assert_eq!(idx.len(), 40);
            for c in 0..4 {
                assert_eq!(idx.iter().filter(|&&i| d.waves[i].label == c).count(), 10);
            }
        }
        assert!(d.waves.iter().all(|w| w.len() == 44_100 && w.peak() <= 1.0));
    }

    #[test]
    fn same_seed_same_audio() {
        let spec = SynthSpec { samples_per_class: 4, ..Default::default() };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.waves, b.waves);
        let c = generate(&SynthSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.waves, c.waves);
    }

    #[test]
    fn aliasing_is_rejected() {
        let spec = SynthSpec { classes: vec![Generator::Tone { freq: 10_800.0 }], ..Default::default() };
        assert!(generate(&spec).is_err());
        let spec = SynthSpec { samples_per_class: 3, ..Default::default() };
        assert!(generate(&spec).is_err());
    }
}
