//! Training-time augmentation: silence trimming, random rescaling, random
//! pad/crop, log-mel featurization, time/frequency masking and channel
//! triplication, applied in that order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio_io::{interpolate, WaveSample};
use crate::dsp::{Featurizer, LogMelSpectrogram};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub silence_threshold: f64,
    /// Output clip length in samples.
    pub target_len: usize,
    /// Maximum frequency-mask width in mel bins (F).
    pub freq_mask_width: usize,
    /// Maximum time-mask width in frames (T).
    pub time_mask_width: usize,
    /// Number of frequency masks (f).
    pub freq_masks: usize,
    /// Number of time masks (t).
    pub time_masks: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_min: 1.0 / 1.25,
            scale_max: 1.25,
            silence_threshold: 1e-4,
            target_len: 220_500,
            freq_mask_width: 32,
            time_mask_width: 32,
            freq_masks: 2,
            time_masks: 1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < scale_min <= scale_max, got [{}, {}]",
                self.scale_min, self.scale_max
            )));
        }
        if self.silence_threshold.is_nan() || self.silence_threshold < 0.0 {
            return Err(Error::Config("silence_threshold must be >= 0".into()));
        }
        if self.target_len == 0 {
            return Err(Error::Config("target_len must be positive".into()));
        }
        Ok(())
    }
}

/// Drops leading and trailing samples with `|x| < threshold`. A clip that is
/// entirely below threshold becomes a single zero sample.
pub fn trim_silence(wave: &WaveSample, threshold: f64) -> WaveSample {
    let loud = |x: &f64| x.abs() >= threshold;
    match (wave.samples.iter().position(loud), wave.samples.iter().rposition(loud)) {
        (Some(a), Some(b)) => wave.with_samples(wave.samples[a..=b].to_vec()),
        _ => wave.with_samples(vec![0.0]),
    }
}

/// Resamples the clip by factor `s`: output length `round(len / s)`, output
/// sample `i` read from input position `i·s`.
pub fn scale_by(wave: &WaveSample, s: f64) -> WaveSample {
    if s == 1.0 {
        return wave.clone();
    }
    let out_len = ((wave.len() as f64 / s).round() as usize).max(1);
    wave.with_samples(interpolate(&wave.samples, s, out_len))
}

/// Draws `s` uniformly from `[scale_min, scale_max]` and applies [`scale_by`].
pub fn random_scale(wave: &WaveSample, cfg: &AugmentConfig, rng: &mut Stream) -> WaveSample {
    let s =
        if cfg.scale_min == cfg.scale_max { cfg.scale_min } else { rng.random_range(cfg.scale_min..=cfg.scale_max) };
    scale_by(wave, s)
}

/// Zero-pads (random front/back split) or crops (random window) to exactly
/// `target_len` samples.
pub fn fit_length(wave: &WaveSample, target_len: usize, rng: &mut Stream) -> WaveSample {
    let len = wave.len();
    if len == target_len {
        return wave.clone();
    }
    if len < target_len {
        let front = rng.random_range(0..=target_len - len);
        pad(wave, target_len, front)
    } else {
        let start = rng.random_range(0..=len - target_len);
        wave.with_samples(wave.samples[start..start + target_len].to_vec())
    }
}

/// Deterministic counterpart of [`fit_length`]: centered crop or symmetric
/// zero padding (the extra sample, if any, goes to the back).
pub fn fit_length_centered(wave: &WaveSample, target_len: usize) -> WaveSample {
    let len = wave.len();
    if len <= target_len {
        pad(wave, target_len, (target_len - len) / 2)
    } else {
        let start = (len - target_len) / 2;
        wave.with_samples(wave.samples[start..start + target_len].to_vec())
    }
}

fn pad(wave: &WaveSample, target_len: usize, front: usize) -> WaveSample {
    let mut out = vec![0.0; target_len];
    out[front..front + wave.len()].copy_from_slice(&wave.samples);
    wave.with_samples(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAxis {
    Frequency,
    Time,
}

/// One drawn mask: rows (frequency) or columns (time) `start..start+width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskDraw {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

/// Draws the mask rectangles for an `n_mels × n_frames` grid: `freq_masks`
/// frequency masks, then `time_masks` time masks. Each width is uniform in
/// `[0, max]`, each start uniform in `[0, axis − width]`.
pub fn draw_masks(n_mels: usize, n_frames: usize, cfg: &AugmentConfig, rng: &mut Stream) -> Result<Vec<MaskDraw>> {
    if cfg.freq_masks > 0 && cfg.freq_mask_width > n_mels {
        return Err(Error::Config(format!("frequency mask width {} exceeds {n_mels} mel bins", cfg.freq_mask_width)));
    }
    if cfg.time_masks > 0 && cfg.time_mask_width > n_frames {
        return Err(Error::Config(format!("time mask width {} exceeds {n_frames} frames", cfg.time_mask_width)));
    }
    let mut draws = Vec::with_capacity(cfg.freq_masks + cfg.time_masks);
    let draw = |axis, max: usize, size: usize, rng: &mut Stream| {
        let width = rng.random_range(0..=max);
        let start = rng.random_range(0..=size - width);
        MaskDraw { axis, start, width }
    };
    for _ in 0..cfg.freq_masks {
        draws.push(draw(MaskAxis::Frequency, cfg.freq_mask_width, n_mels, rng));
    }
    for _ in 0..cfg.time_masks {
        draws.push(draw(MaskAxis::Time, cfg.time_mask_width, n_frames, rng));
    }
    Ok(draws)
}

pub fn apply_masks(spec: &mut LogMelSpectrogram, masks: &[MaskDraw]) {
    let g = &mut spec.grid;
    for m in masks {
        match m.axis {
            MaskAxis::Frequency => {
                for r in m.start..m.start + m.width {
                    g.values[r * g.cols..(r + 1) * g.cols].fill(0.0);
                }
            }
            MaskAxis::Time => {
                for r in 0..g.rows {
                    g.values[r * g.cols + m.start..r * g.cols + m.start + m.width].fill(0.0);
                }
            }
        }
    }
}

/// Frequency and time masking; masked cells become 0.
pub fn mask_spectrogram(spec: &LogMelSpectrogram, cfg: &AugmentConfig, rng: &mut Stream) -> Result<LogMelSpectrogram> {
    let masks = draw_masks(spec.n_mels(), spec.n_frames(), cfg, rng)?;
    let mut out = spec.clone();
    apply_masks(&mut out, &masks);
    Ok(out)
}

/// Stacks three identical copies of the spectrogram: `[3 × n_mels × n_frames]`.
pub fn triplicate(spec: &LogMelSpectrogram) -> Tensor {
    let g = &spec.grid;
    let mut data = Vec::with_capacity(3 * g.values.len());
    for _ in 0..3 {
        data.extend_from_slice(&g.values);
    }
    Tensor { shape: vec![3, g.rows, g.cols], data }
}

/// The stages of the augmentation pipeline. [`run_pipeline`] calls them in
/// the fixed order trim, scale, fit, featurize, mask, triplicate.
pub trait PipelineStages {
    fn trim(&self, wave: WaveSample) -> WaveSample;
    fn scale(&self, wave: WaveSample, rng: &mut Stream) -> WaveSample;
    fn fit(&self, wave: WaveSample, rng: &mut Stream) -> WaveSample;
    fn featurize(&self, wave: &WaveSample) -> Result<LogMelSpectrogram>;
    fn mask(&self, spec: LogMelSpectrogram, rng: &mut Stream) -> Result<LogMelSpectrogram>;
    fn triplicate(&self, spec: &LogMelSpectrogram) -> Tensor;
}

pub fn run_pipeline<S: PipelineStages + ?Sized>(stages: &S, wave: &WaveSample, rng: &mut Stream) -> Result<Tensor> {
    let w = stages.trim(wave.clone());
    let w = stages.scale(w, rng);
    let w = stages.fit(w, rng);
    let spec = stages.featurize(&w)?;
    let spec = stages.mask(spec, rng)?;
    Ok(stages.triplicate(&spec))
}

/// The standard stages backed by the functions in this module.
#[derive(Debug, Clone)]
pub struct Augmenter<'a> {
    pub cfg: &'a AugmentConfig,
    pub featurizer: &'a Featurizer,
}

impl PipelineStages for Augmenter<'_> {
    fn trim(&self, wave: WaveSample) -> WaveSample {
        trim_silence(&wave, self.cfg.silence_threshold)
    }

    fn scale(&self, wave: WaveSample, rng: &mut Stream) -> WaveSample {
        random_scale(&wave, self.cfg, rng)
    }

    fn fit(&self, wave: WaveSample, rng: &mut Stream) -> WaveSample {
        fit_length(&wave, self.cfg.target_len, rng)
    }

    fn featurize(&self, wave: &WaveSample) -> Result<LogMelSpectrogram> {
        self.featurizer.log_mel(wave)
    }

    fn mask(&self, spec: LogMelSpectrogram, rng: &mut Stream) -> Result<LogMelSpectrogram> {
        mask_spectrogram(&spec, self.cfg, rng)
    }

    fn triplicate(&self, spec: &LogMelSpectrogram) -> Tensor {
        triplicate(spec)
    }
}

impl Augmenter<'_> {
    pub fn augment(&self, wave: &WaveSample, rng: &mut Stream) -> Result<Tensor> {
        run_pipeline(self, wave, rng)
    }

    /// Augmentation-free input for evaluation: centered length fit,
    /// log-mel, triplicate.
    pub fn eval_input(&self, wave: &WaveSample) -> Result<Tensor> {
        let w = fit_length_centered(wave, self.cfg.target_len);
        Ok(triplicate(&self.featurizer.log_mel(&w)?))
    }
}
