//! Stuttering event detection with fine-grained contrastive learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors and a reverse-mode tape
//! - [`features`]: fbank extraction, spectral masking, synthetic data and file formats
//! - [`model`]: Conformer-lite encoder with clip-level and frame-level heads
//! - [`mining`]: frame likelihood, 1-D morphology and confusing/easy frame selection
//! - [`losses`]: clip classification loss and the stutter contrast loss
//! - [`pipeline`]: training, inference, F1 evaluation and ablation

// Negated float comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod features;
pub mod losses;
pub mod mining;
pub mod model;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};

/// Number of stutter classes.
pub const NUM_CLASSES: usize = 5;

/// Class names in label order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["/p", "/b", "/r", "/wr", "/i"];
