//! Frame features, clip records and their on-disk formats.

pub mod fbank;
pub mod io;
pub mod manifest;
pub mod specaug;
pub mod synth;

pub use fbank::{fbank, Fbank, Waveform};
pub use io::{read_features, write_features};
pub use manifest::{read_manifest, write_manifest, ClipRecord, Labels};
pub use specaug::{apply_mask, spec_mask, MaskDraw};
pub use synth::{synth_clip, synth_dataset, SyntheticClip, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// T×D frame features of one clip, stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature sequence must be non-empty, got {}x{}",
                frames, dim
            )));
        }
        if values.len() != frames * dim {
            return Err(Error::InvalidArgument(format!(
                "{}x{} features need {} values, got {}",
                frames,
                dim,
                frames * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument("features contain NaN".into()));
        }
        Ok(FeatureSequence { frames, dim, values })
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// Mean over every cell, accumulated in `f64`.
    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    /// Appends `extra` frames of `fill`, e.g. to build padded batches.
    pub fn padded(&self, extra: usize, fill: f32) -> FeatureSequence {
        let mut values = self.values.clone();
        values.resize(values.len() + extra * self.dim, fill);
        FeatureSequence {
            frames: self.frames + extra,
            dim: self.dim,
            values,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(
            self.frames,
            self.dim,
            self.values.iter().map(|&v| v as f64).collect(),
        )
        .expect("consistent shape")
    }
}
