//! Audio ingestion: WAV decoding, peak normalization, linear resampling and
//! dataset manifests.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};

/// Sample rate every clip is brought to before augmentation.
pub const CANONICAL_RATE: u32 = 44_100;

/// A mono audio clip with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveSample {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub label: usize,
    pub source_id: String,
}

impl WaveSample {
    pub fn new(samples: Vec<f64>, sample_rate: u32, label: usize, source_id: impl Into<String>) -> Self {
        Self { samples, sample_rate, label, source_id: source_id.into() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// Same metadata, different samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Self {
        Self { samples, sample_rate: self.sample_rate, label: self.label, source_id: self.source_id.clone() }
    }
}

/// Decodes a RIFF/WAVE file (PCM 16-bit or IEEE float 32-bit, mono or
/// stereo). Stereo is averaged down to mono; no normalization is applied.
/// The label is left at 0.
pub fn load_wav(path: impl AsRef<Path>) -> Result<WaveSample> {
    let path = path.as_ref();
    let audio_err = |reason: String| Error::Audio { path: path.to_path_buf(), reason };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => audio_err(other.to_string()),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels != 1 && channels != 2 {
        return Err(audio_err(format!("{channels} channels")));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => {
            reader.into_samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>()
        }
        (fmt, bits) => return Err(audio_err(format!("{fmt:?} {bits}-bit"))),
    }
    .map_err(|e| audio_err(e.to_string()))?;

    let samples: Vec<f64> = if channels == 1 {
        interleaved
    } else {
        interleaved.chunks_exact(2).map(|pair| 0.5 * (pair[0] + pair[1])).collect()
    };
    if samples.is_empty() {
        return Err(audio_err("zero-length audio".into()));
    }
    let source_id = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(WaveSample::new(samples, spec.sample_rate, 0, source_id))
}

/// Writes a mono clip as 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, wave: &WaveSample) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio { path: path.to_path_buf(), reason: other.to_string() },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &wave.samples {
        writer.write_sample(s as f32).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

/// Scales a clip so its peak absolute amplitude is 1. Silence is returned
/// unchanged.
pub fn normalize(wave: &WaveSample) -> WaveSample {
    let peak = wave.peak();
    if peak > 0.0 {
        wave.with_samples(wave.samples.iter().map(|x| x / peak).collect())
    } else {
        wave.clone()
    }
}

/// Linear interpolation of `input` at positions `i * step` for
/// `i in 0..out_len`. Positions past the last sample clamp to it.
pub(crate) fn interpolate(input: &[f64], step: f64, out_len: usize) -> Vec<f64> {
    let last = input.len() - 1;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let k = pos.floor() as usize;
            if k >= last {
                input[last]
            } else {
                let frac = pos - k as f64;
                input[k] + frac * (input[k + 1] - input[k])
            }
        })
        .collect()
}

/// Resamples by linear interpolation. Output length is
/// `round(len * target_rate / sample_rate)`.
pub fn resample_linear(wave: &WaveSample, target_rate: u32) -> Result<WaveSample> {
    if target_rate == 0 {
        return Err(Error::Config("target sample rate must be positive".into()));
    }
    if target_rate == wave.sample_rate || wave.is_empty() {
        let mut out = wave.clone();
        out.sample_rate = target_rate;
        return Ok(out);
    }
    let src = f64::from(wave.sample_rate);
    let dst = f64::from(target_rate);
    let out_len = ((wave.len() as f64 * dst / src).round() as usize).max(1);
    let mut out = wave.with_samples(interpolate(&wave.samples, src / dst, out_len));
    out.sample_rate = target_rate;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub filename: String,
    /// 1-based fold index.
    pub fold: usize,
    pub label: usize,
    pub category: String,
}

/// Clip list with fold assignment, in the ESC-50 metadata layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub num_classes: usize,
    pub num_folds: usize,
    /// Directory that relative filenames are resolved against.
    pub audio_root: PathBuf,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    filename: String,
    fold: String,
    target: String,
    category: String,
}

impl DatasetManifest {
    /// Builds a manifest, checking fold/label ranges and duplicate files.
    pub fn from_entries(entries: Vec<ManifestEntry>, audio_root: PathBuf) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Data("manifest has no entries".into()));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if e.fold == 0 {
                return Err(Error::Data(format!("{}: fold indices start at 1", e.filename)));
            }
            if !seen.insert(e.filename.as_str()) {
                return Err(Error::Data(format!("duplicate filename {}", e.filename)));
            }
        }
        let num_classes = entries.iter().map(|e| e.label).max().unwrap_or(0) + 1;
        let num_folds = entries.iter().map(|e| e.fold).max().unwrap_or(1);
        Ok(Self { entries, num_classes, num_folds, audio_root })
    }

    pub fn path_of(&self, entry: &ManifestEntry) -> PathBuf {
        self.audio_root.join(&entry.filename)
    }

    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].fold == fold).collect()
    }

    /// Writes the manifest as CSV with the standard header.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["filename", "fold", "target", "category"]).map_err(|e| csv_err(path, e))?;
        for e in &self.entries {
            w.write_record([e.filename.clone(), e.fold.to_string(), e.label.to_string(), e.category.clone()])
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Manifest { path: path.to_path_buf(), reason: e.to_string() }
    }
}

/// Parses a metadata CSV with at least the columns `filename`, `fold`,
/// `target`, `category`. Relative filenames resolve against the CSV's
/// directory unless `audio_root` is given.
pub fn load_manifest(path: impl AsRef<Path>, audio_root: Option<&Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let bad = |reason: String| Error::Manifest { path: path.to_path_buf(), reason };
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    for col in ["filename", "fold", "target", "category"] {
        if !headers.iter().any(|h| h.trim() == col) {
            return Err(bad(format!("missing column '{col}'")));
        }
    }
    let mut entries = Vec::new();
    for (line, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let fold = row
            .fold
            .trim()
            .parse::<usize>()
            .map_err(|_| bad(format!("row {}: fold '{}' is not an integer", line + 1, row.fold)))?;
        let label = row
            .target
            .trim()
            .parse::<usize>()
            .map_err(|_| bad(format!("row {}: target '{}' is not an integer", line + 1, row.target)))?;
        entries.push(ManifestEntry { filename: row.filename, fold, label, category: row.category });
    }
    let root = match audio_root {
        Some(r) => r.to_path_buf(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    DatasetManifest::from_entries(entries, root).map_err(|e| match e {
        Error::Data(reason) => bad(reason),
        other => other,
    })
}
