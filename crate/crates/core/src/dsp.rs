//! Log-mel features: Hamming-windowed power STFT, triangular mel filterbank,
//! natural-log compression, and the on-disk feature cache format.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio_io::WaveSample;
use crate::error::{Error, Result};

/// Additive floor inside the logarithm.
pub const LOG_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// Upper filterbank edge; `None` means Nyquist.
    pub fmax: Option<f64>,
    /// Per-spectrogram zero-mean / unit-variance scaling after the log.
    pub standardize: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { window_len: 1024, hop: 512, n_mels: 128, fmin: 0.0, fmax: None, standardize: false }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn fmax_for(&self, sample_rate: u32) -> f64 {
        self.fmax.unwrap_or(f64::from(sample_rate) / 2.0)
    }

    /// Frame count for a signal of `len` samples (no tail padding).
    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            1 + (len - self.window_len) / self.hop
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if !self.window_len.is_power_of_two() || self.window_len < 2 {
            return Err(Error::Config(format!("window_len must be a power of two >= 2, got {}", self.window_len)));
        }
        if self.hop == 0 {
            return Err(Error::Config("hop must be positive".into()));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        let nyquist = f64::from(sample_rate) / 2.0;
        let fmax = self.fmax_for(sample_rate);
        if !(self.fmin >= 0.0 && self.fmin < fmax && fmax <= nyquist) {
            return Err(Error::Config(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got fmin={} fmax={fmax}",
                self.fmin
            )));
        }
        Ok(())
    }
}

/// Row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }
}

/// Log-mel spectrogram, `n_mels` rows by `n_frames` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub grid: Grid,
    pub config: StftConfig,
    pub sample_rate: u32,
}

impl LogMelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.grid.rows
    }

    pub fn n_frames(&self) -> usize {
        self.grid.cols
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Symmetric Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let denom = (n - 1) as f64;
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / denom).cos()).collect()
}

/// The `n_mels + 2` mel-equispaced edge frequencies; entries `1..=n_mels`
/// are the filter centers.
pub fn mel_points(cfg: &StftConfig, sample_rate: u32) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax_for(sample_rate));
    let n = cfg.n_mels + 1;
    (0..=n).map(|j| mel_to_hz(lo + (hi - lo) * j as f64 / n as f64)).collect()
}

pub fn mel_centers(cfg: &StftConfig, sample_rate: u32) -> Vec<f64> {
    let pts = mel_points(cfg, sample_rate);
    pts[1..pts.len() - 1].to_vec()
}

/// Integral of the unit-peak triangle (left, center, right) over (-inf, x].
fn triangle_cdf(x: f64, left: f64, center: f64, right: f64) -> f64 {
    if x <= left {
        0.0
    } else if x <= center {
        let w = center - left;
        if w > 0.0 {
            (x - left) * (x - left) / (2.0 * w)
        } else {
            0.0
        }
    } else if x < right {
        let up = 0.5 * (center - left);
        let w = right - center;
        up + 0.5 * w - (right - x) * (right - x) / (2.0 * w)
    } else {
        0.5 * (right - left)
    }
}

/// Triangular mel filterbank, `n_mels` rows by `window_len/2 + 1` columns.
///
/// Each weight is the mean of the unit-peak triangle over the frequency cell
/// of the FFT bin (width `sample_rate / window_len`, centered on the bin).
/// Averaging over the cell keeps narrow low-frequency filters from falling
/// between bin centers, so every filter has support and every interior bin
/// is covered by at least one filter.
pub fn mel_filterbank(cfg: &StftConfig, sample_rate: u32) -> Result<Grid> {
    cfg.validate(sample_rate)?;
    let bins = cfg.bins();
    let df = f64::from(sample_rate) / cfg.window_len as f64;
    let pts = mel_points(cfg, sample_rate);
    let mut fb = Grid::zeros(cfg.n_mels, bins);
    for m in 0..cfg.n_mels {
        let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
        for k in 0..bins {
            let f = k as f64 * df;
            let w = (triangle_cdf(f + 0.5 * df, l, c, r) - triangle_cdf(f - 0.5 * df, l, c, r)) / df;
            *fb.at_mut(m, k) = w.max(0.0);
        }
        if fb.row(m).iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!("mel filter {m} has no support with {} bins; reduce n_mels", bins)));
        }
    }
    Ok(fb)
}

/// Sparse row view of a filterbank: (first nonzero column, weights).
#[derive(Debug, Clone)]
struct SparseRow {
    start: usize,
    weights: Vec<f64>,
}

/// Reusable feature extractor for one (config, sample rate) pair. Holds the
/// FFT plan, window and filterbank; shareable read-only across threads.
#[derive(Clone)]
pub struct Featurizer {
    cfg: StftConfig,
    sample_rate: u32,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filters: Vec<SparseRow>,
}

impl std::fmt::Debug for Featurizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Featurizer").field("cfg", &self.cfg).field("sample_rate", &self.sample_rate).finish()
    }
}

impl Featurizer {
    pub fn new(cfg: &StftConfig, sample_rate: u32) -> Result<Self> {
        let fb = mel_filterbank(cfg, sample_rate)?;
        let filters = (0..fb.rows)
            .map(|m| {
                let row = fb.row(m);
                let start = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let end = row.iter().rposition(|&w| w > 0.0).map_or(start, |e| e + 1);
                SparseRow { start, weights: row[start..end].to_vec() }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            window: hamming(cfg.window_len),
            fft: FftPlanner::new().plan_fft_forward(cfg.window_len),
            filters,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn stft_power(&self, samples: &[f64]) -> Result<Grid> {
        let n = self.cfg.window_len;
        if samples.len() < n {
            return Err(Error::Data(format!(
                "signal of {} samples is shorter than one {n}-sample window",
                samples.len()
            )));
        }
        let frames = self.cfg.frames_for(samples.len());
        let bins = self.cfg.bins();
        let mut out = Grid::zeros(bins, frames);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let frame = &samples[t * self.cfg.hop..t * self.cfg.hop + n];
            for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(x * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, c) in buf.iter().take(bins).enumerate() {
                *out.at_mut(k, t) = c.norm_sqr();
            }
        }
        Ok(out)
    }

    /// Projects a power grid (bins x frames) through the filterbank.
    pub fn apply_filterbank(&self, power: &Grid) -> Result<Grid> {
        if power.rows != self.cfg.bins() {
            return Err(Error::shape(
                "apply_filterbank",
                format!("expected {} bins, got {}", self.cfg.bins(), power.rows),
            ));
        }
        let mut out = Grid::zeros(self.filters.len(), power.cols);
        for (m, f) in self.filters.iter().enumerate() {
            let dst = &mut out.values[m * power.cols..(m + 1) * power.cols];
            for (j, &w) in f.weights.iter().enumerate() {
                let src = power.row(f.start + j);
                for (d, &p) in dst.iter_mut().zip(src) {
                    *d += w * p;
                }
            }
        }
        Ok(out)
    }

    pub fn log_mel(&self, wave: &WaveSample) -> Result<LogMelSpectrogram> {
        if wave.sample_rate != self.sample_rate {
            return Err(Error::Data(format!(
                "{}: sample rate {} does not match featurizer rate {}",
                wave.source_id, wave.sample_rate, self.sample_rate
            )));
        }
        let power = self.stft_power(&wave.samples)?;
        let mut mel = self.apply_filterbank(&power)?;
        for v in &mut mel.values {
            *v = (*v + LOG_FLOOR).ln();
        }
        if self.cfg.standardize {
            standardize(&mut mel.values);
        }
        Ok(LogMelSpectrogram { grid: mel, config: self.cfg.clone(), sample_rate: self.sample_rate })
    }
}

fn standardize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    for v in values {
        *v = (*v - mean) * scale;
    }
}

pub fn stft_power(wave: &WaveSample, cfg: &StftConfig) -> Result<Grid> {
    Featurizer::new(cfg, wave.sample_rate)?.stft_power(&wave.samples)
}

pub fn log_mel(wave: &WaveSample, cfg: &StftConfig) -> Result<LogMelSpectrogram> {
    Featurizer::new(cfg, wave.sample_rate)?.log_mel(wave)
}

const CACHE_MAGIC: &[u8; 12] = b"SOUNDCLRFEAT";
const CACHE_VERSION: u32 = 1;

/// Writes a feature-cache record: 12-byte magic, u32 version, u32 rows,
/// u32 cols (all little-endian), then row-major f32 values.
pub fn write_feature_cache(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(24 + 4 * grid.values.len());
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(grid.rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(grid.cols as u32).to_le_bytes());
    for &v in &grid.values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let corrupt = |why: &str| Error::Data(format!("{}: feature cache {why}", path.display()));
    if bytes.len() < 24 || &bytes[..12] != CACHE_MAGIC {
        return Err(corrupt("has a bad header"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    if word(12) != CACHE_VERSION {
        return Err(corrupt("has an unsupported version"));
    }
    let (rows, cols) = (word(16) as usize, word(20) as usize);
    if bytes.len() != 24 + 4 * rows * cols {
        return Err(corrupt("is truncated"));
    }
    let values = bytes[24..].chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect();
    Ok(Grid { rows, cols, values })
}
