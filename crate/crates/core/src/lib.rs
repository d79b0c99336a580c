//! Adversarially robust attention classifiers for frame-level video
//! features.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff
//! engine, a two-modality multi-head attention classifier, the plain,
//! adversarial and attention-regularized training objectives, FGSM and
//! DeepFool attacks, GAP/PERR/Hit@1 metrics, a synthetic dataset generator
//! with its binary file format, and the `aart` command-line tool.

pub mod attack;
pub mod autodiff;
pub mod cli;
mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
