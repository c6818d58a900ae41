//! Seeded synthetic stutter data.
//!
//! Each clip is Gaussian noise. Every class is inserted at most once per clip
//! with its own probability; an inserted event adds the class template,
//! scaled to `event_scale · noise_std`, to a contiguous run of frames. Clip
//! labels are exactly the inserted classes and `frame_truth` records the
//! union of event spans.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{run_length_encode, write_manifest, ClipRecord, Labels};
use super::{write_features, FeatureSequence};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::NUM_CLASSES;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_clips: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub min_event: usize,
    pub max_event: usize,
    pub insert_prob: [f64; NUM_CLASSES],
    pub noise_std: f64,
    /// Template amplitude in units of `noise_std`.
    pub event_scale: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_clips: 600,
            min_frames: 48,
            max_frames: 96,
            min_event: 8,
            max_event: 24,
            insert_prob: [0.3; NUM_CLASSES],
            noise_std: 1.0,
            event_scale: 3.0,
            dim: 80,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "n_clips",
    "min_frames",
    "max_frames",
    "min_event",
    "max_event",
    "insert_prob",
    "noise_std",
    "event_scale",
    "dim",
    "seed",
];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("need 1 <= min_frames <= max_frames");
        }
        if self.min_event == 0 || self.min_event > self.max_event {
            return bad("need 1 <= min_event <= max_event");
        }
        if self.insert_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("insert_prob values must lie in [0, 1]");
        }
        if !(self.noise_std > 0.0) || !self.event_scale.is_finite() {
            return bad("noise_std must be > 0");
        }
        if self.dim == 0 {
            return bad("dim must be > 0");
        }
        Ok(())
    }

    /// Reads overrides from a `key = value` file. `insert_prob` takes either
    /// one value for every class or five comma separated values.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(KEYS)?;
        let mut s = SyntheticSpec::default();
        kv.apply("n_clips", &mut s.n_clips)?;
        kv.apply("min_frames", &mut s.min_frames)?;
        kv.apply("max_frames", &mut s.max_frames)?;
        kv.apply("min_event", &mut s.min_event)?;
        kv.apply("max_event", &mut s.max_event)?;
        kv.apply("noise_std", &mut s.noise_std)?;
        kv.apply("event_scale", &mut s.event_scale)?;
        kv.apply("dim", &mut s.dim)?;
        kv.apply("seed", &mut s.seed)?;
        if let Some(p) = kv.list::<f64>("insert_prob")? {
            s.insert_prob = match p.len() {
                1 => [p[0]; NUM_CLASSES],
                NUM_CLASSES => p.try_into().expect("length checked"),
                n => return Err(Error::Config(format!("insert_prob has {} values", n))),
            };
        }
        s.validate()?;
        Ok(s)
    }
}

/// Fixed unit-amplitude pattern of class `c`: a band of `dim / 10` bins
/// (at least one) starting at `c · dim / 5`.
pub fn class_template(class: usize, dim: usize) -> Vec<f64> {
    let band = (dim / (2 * NUM_CLASSES)).max(1);
    let start = (class * dim / NUM_CLASSES).min(dim - band);
    (0..dim)
        .map(|j| if j >= start && j < start + band { 1.0 } else { 0.0 })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub class: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub features: FeatureSequence,
    pub labels: Labels,
    pub events: Vec<Event>,
    pub frame_truth: Vec<bool>,
}

/// Clip `index` of the dataset described by `spec`; independent of other clips.
pub fn synth_clip(spec: &SyntheticSpec, index: usize) -> SyntheticClip {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let frames = rng.gen_range(spec.min_frames..=spec.max_frames);
    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
    let mut values: Vec<f64> = (0..frames * spec.dim).map(|_| noise.sample(&mut rng)).collect();

    let mut labels = [false; NUM_CLASSES];
    let mut events = Vec::new();
    let mut truth = vec![false; frames];
    for (class, &p) in spec.insert_prob.iter().enumerate() {
        // always draw so one class's probability does not shift the others' streams
        let u: f64 = rng.gen();
        let max_len = spec.max_event.min(frames);
        let len = rng.gen_range(spec.min_event.min(max_len)..=max_len);
        let start = rng.gen_range(0..=frames - len);
        if u >= p {
            continue;
        }
        labels[class] = true;
        events.push(Event { class, start, len });
        let template = class_template(class, spec.dim);
        let amp = spec.event_scale * spec.noise_std;
        for t in start..start + len {
            truth[t] = true;
            for (v, w) in values[t * spec.dim..(t + 1) * spec.dim].iter_mut().zip(&template) {
                *v += amp * w;
            }
        }
    }
    let features = FeatureSequence::new(
        frames,
        spec.dim,
        values.into_iter().map(|v| v as f32).collect(),
    )
    .expect("non-empty by validation");
    SyntheticClip {
        features,
        labels,
        events,
        frame_truth: truth,
    }
}

/// Writes `features/clip_NNNNN.fgc` files and `manifest.jsonl` under `out_dir`.
pub fn synth_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<Vec<ClipRecord>> {
    spec.validate()?;
    let feat_dir = out_dir.join("features");
    std::fs::create_dir_all(&feat_dir)?;
    let mut records = Vec::with_capacity(spec.n_clips);
    for i in 0..spec.n_clips {
        let clip = synth_clip(spec, i);
        let id = format!("clip_{:05}", i);
        let path = feat_dir.join(format!("{}.fgc", id));
        write_features(&path, &clip.features)?;
        records.push(ClipRecord {
            id,
            feature_path: path,
            labels: clip.labels,
            frame_truth: Some(run_length_encode(&clip.frame_truth)),
        });
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}
