//! Environmental sound classification with cross-entropy, two-stage
//! supervised-contrastive and single-stage hybrid training.
//!
//! The pipeline runs from WAV decoding ([`audio_io`]) through seeded
//! augmentation ([`augmentation`]) and log-mel features ([`dsp`]) into a
//! small convolutional encoder with hand-written backward passes ([`nn`]),
//! trained by [`trainer`] on the losses in [`losses`] and scored by
//! [`evaluation`].

pub mod audio_io;
pub mod augmentation;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod evaluation;
pub mod gradsuite;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
