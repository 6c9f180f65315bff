//! Adversarial training and robustness evaluation for end-to-end CTC speech
//! recognition.
//!
//! The crate covers the full desk-scale pipeline: manifest/audio ingestion and
//! log-mel featurization, a residual-CNN + bidirectional-GRU recognizer with
//! analytic gradients w.r.t. both parameters and input features, CTC /
//! optimal-transport / KL losses, a family of L∞ feature-space attacks (FGSM,
//! MIFGSM, PGD, feature scattering, mixPGD), adversarial training loops, and a
//! CER/WER evaluation harness for white-box and transfer settings.

pub mod alphabet;
pub mod attacks;
pub mod audio;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod train;

pub use error::{Error, Result};
