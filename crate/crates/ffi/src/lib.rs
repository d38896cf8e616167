//! C ABI over the soundclr library.
//!
//! Every fallible entry point returns a [`SoundclrStatus`]. On failure the
//! message is available from [`soundclr_last_error`] on the same thread.
//! Models are exposed as opaque [`SoundclrModel`] handles owned by the
//! caller and released with [`soundclr_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use soundclr::audio_io::{self, WaveSample};
use soundclr::augmentation::Augmenter;
use soundclr::dsp::{Featurizer, StftConfig};
use soundclr::losses::{self, LossConfig};
use soundclr::nn::ops::softmax;
use soundclr::nn::{Model, Tensor};
use soundclr::trainer::{load_checkpoint, TrainConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoundclrStatus {
    Ok = 0,
    /// Invalid configuration or argument shapes.
    InvalidArgument = 1,
    /// Unreadable or malformed input data.
    Data = 2,
    /// A non-finite value appeared in a computation.
    Numeric = 3,
    NullPointer = 4,
    /// The output buffer is too small; the required size was still reported.
    BufferTooSmall = 5,
    Panic = 6,
}

/// Trained model together with the feature settings it was trained with.
pub struct SoundclrModel {
    model: Model,
    train: TrainConfig,
    featurizer: Featurizer,
    sample_rate: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn from_error(err: soundclr::Error) -> SoundclrStatus {
    let status = match err.exit_code() {
        1 => SoundclrStatus::InvalidArgument,
        3 => SoundclrStatus::Numeric,
        _ => SoundclrStatus::Data,
    };
    set_error(err.to_string());
    status
}

fn fail(status: SoundclrStatus, msg: &str) -> SoundclrStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> SoundclrStatus) -> SoundclrStatus {
    set_error("");
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(SoundclrStatus::Panic, "internal panic"))
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize) -> Option<&'a [T]> {
    if len == 0 {
        Some(&[])
    } else if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn soundclr_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version contains NUL"),
    };
    VERSION.as_ptr()
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call into the library on this
/// thread.
#[no_mangle]
pub extern "C" fn soundclr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint. `sample_rate` is the rate the model's training clips
/// were featurized at; audio passed to [`soundclr_model_predict`] is
/// resampled to it.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn soundclr_model_load(
    path: *const c_char,
    sample_rate: u32,
    out: *mut *mut SoundclrModel,
) -> SoundclrStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(SoundclrStatus::NullPointer, "null path or output pointer");
        }
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(SoundclrStatus::InvalidArgument, "path is not valid UTF-8");
        };
        let loaded = load_checkpoint(Path::new(path)).and_then(|ckpt| {
            let featurizer = Featurizer::new(&ckpt.config.features, sample_rate)?;
            Ok(SoundclrModel { model: ckpt.model, train: ckpt.config, featurizer, sample_rate })
        });
        match loaded {
            Ok(m) => {
                *out = Box::into_raw(Box::new(m));
                SoundclrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a handle from [`soundclr_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn soundclr_model_free(model: *mut SoundclrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes the model predicts, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn soundclr_model_num_classes(model: *const SoundclrModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.num_classes)
}

/// Class probabilities for one mono clip. The clip is resampled to the
/// model's rate, peak-normalized and fit to the training length.
///
/// # Safety
/// `samples` must hold `len` values and `probs` room for `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn soundclr_model_predict(
    model: *const SoundclrModel,
    samples: *const f64,
    len: usize,
    sample_rate: u32,
    probs: *mut f64,
    capacity: usize,
) -> SoundclrStatus {
    guard(|| {
        let (Some(m), Some(samples)) = (model.as_ref(), slice(samples, len)) else {
            return fail(SoundclrStatus::NullPointer, "null model or samples");
        };
        let classes = m.model.config.num_classes;
        if probs.is_null() {
            return fail(SoundclrStatus::NullPointer, "null output buffer");
        }
        if capacity < classes {
            return fail(SoundclrStatus::BufferTooSmall, &format!("need {classes} values, buffer holds {capacity}"));
        }
        let wave = WaveSample::new(samples.to_vec(), sample_rate, 0, "ffi");
        let result = audio_io::resample_linear(&wave, m.sample_rate).and_then(|w| {
            let aug = Augmenter { cfg: &m.train.augment, featurizer: &m.featurizer };
            let input = aug.eval_input(&audio_io::normalize(&w))?;
            softmax(&m.model.logits(&[input])?)
        });
        match result {
            Ok(p) => {
                std::slice::from_raw_parts_mut(probs, classes).copy_from_slice(p.row(0));
                SoundclrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Log-mel spectrogram with the default analysis settings, written
/// row-major (mel band by frame) into `out`. The dimensions are always
/// stored in `rows` and `cols`; pass a null `out` to query them.
///
/// # Safety
/// `samples` must hold `len` values, `out` room for `capacity` values, and
/// `rows`/`cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn soundclr_log_mel(
    samples: *const f64,
    len: usize,
    sample_rate: u32,
    out: *mut f64,
    capacity: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> SoundclrStatus {
    guard(|| {
        let Some(samples) = slice(samples, len) else {
            return fail(SoundclrStatus::NullPointer, "null samples");
        };
        if rows.is_null() || cols.is_null() {
            return fail(SoundclrStatus::NullPointer, "null dimension pointer");
        }
        let wave = WaveSample::new(samples.to_vec(), sample_rate, 0, "ffi");
        let spec = match Featurizer::new(&StftConfig::default(), sample_rate).and_then(|f| f.log_mel(&wave)) {
            Ok(s) => s,
            Err(e) => return from_error(e),
        };
        *rows = spec.grid.rows;
        *cols = spec.grid.cols;
        let need = spec.grid.values.len();
        if out.is_null() || capacity < need {
            return fail(SoundclrStatus::BufferTooSmall, &format!("need {need} values, buffer holds {capacity}"));
        }
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(&spec.grid.values);
        SoundclrStatus::Ok
    })
}

/// Supervised contrastive loss of `n` unit-norm rows of width `dim`.
/// When `grad` is not null it receives the `n * dim` gradient.
///
/// # Safety
/// `z` must hold `n * dim` values, `labels` `n` values, `loss` must be
/// writable, and `grad` null or room for `n * dim` values.
#[no_mangle]
pub unsafe extern "C" fn soundclr_sup_contrastive(
    z: *const f64,
    n: usize,
    dim: usize,
    labels: *const usize,
    tau: f64,
    self_in_numerator: bool,
    loss: *mut f64,
    grad: *mut f64,
) -> SoundclrStatus {
    guard(|| {
        let Some(total) = n.checked_mul(dim) else {
            return fail(SoundclrStatus::InvalidArgument, "n * dim overflows");
        };
        let (Some(z), Some(labels)) = (slice(z, total), slice(labels, n)) else {
            return fail(SoundclrStatus::NullPointer, "null embeddings or labels");
        };
        if loss.is_null() {
            return fail(SoundclrStatus::NullPointer, "null loss pointer");
        }
        let cfg = LossConfig { tau, self_in_numerator, ..LossConfig::default() };
        let value = Tensor::new(vec![n, dim], z.to_vec()).and_then(|z| losses::sup_contrastive(&z, labels, &cfg));
        match value {
            Ok(v) => {
                *loss = v.value;
                if !grad.is_null() {
                    std::slice::from_raw_parts_mut(grad, total).copy_from_slice(&v.grad.data);
                }
                SoundclrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
