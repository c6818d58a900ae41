//! Time/frequency masking for training-time augmentation.

use rand::Rng;

use super::FeatureSequence;

/// Largest time mask, in frames.
pub const MAX_TIME_MASK: usize = 50;
/// Largest frequency mask, in bins.
pub const MAX_FREQ_MASK: usize = 10;

/// One time mask and one frequency mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskDraw {
    pub time_start: usize,
    pub time_width: usize,
    pub freq_start: usize,
    pub freq_width: usize,
}

impl MaskDraw {
    /// Widths are uniform on `0..=min(50, T)` and `0..=min(10, D)`, starts
    /// uniform over the positions where the mask fits.
    pub fn sample<R: Rng + ?Sized>(frames: usize, dim: usize, rng: &mut R) -> Self {
        let time_width = rng.gen_range(0..=MAX_TIME_MASK.min(frames));
        let time_start = rng.gen_range(0..=frames - time_width);
        let freq_width = rng.gen_range(0..=MAX_FREQ_MASK.min(dim));
        let freq_start = rng.gen_range(0..=dim - freq_width);
        MaskDraw {
            time_start,
            time_width,
            freq_start,
            freq_width,
        }
    }

    pub fn covers(&self, t: usize, f: usize) -> bool {
        (t >= self.time_start && t < self.time_start + self.time_width)
            || (f >= self.freq_start && f < self.freq_start + self.freq_width)
    }
}

/// Fills the masked cells with the mean of the whole clip.
pub fn apply_mask(features: &FeatureSequence, draw: &MaskDraw) -> FeatureSequence {
    let mean = features.mean() as f32;
    let mut out = features.clone();
    let dim = features.dim();
    for t in 0..features.num_frames() {
        for f in 0..dim {
            if draw.covers(t, f) {
                out.values_mut()[t * dim + f] = mean;
            }
        }
    }
    out
}

pub fn spec_mask<R: Rng + ?Sized>(features: &FeatureSequence, rng: &mut R) -> FeatureSequence {
    let draw = MaskDraw::sample(features.num_frames(), features.dim(), rng);
    apply_mask(features, &draw)
}
