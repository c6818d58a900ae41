//! Training loop.
//!
//! Three random streams keep runs reproducible and variants comparable:
//! initialisation is seeded by `seed`; shuffling, spectral masks and dropout
//! share one stream seeded by `seed`; mining draws from a per-clip stream
//! seeded by `seed ^ clip_index` and positioned by epoch. Mining therefore
//! never shifts the shared stream, so an `alpha = 0` run follows the baseline
//! trajectory exactly.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::Adam;
use super::{Clip, TrainConfig};
use crate::error::{Error, Result};
use crate::features::{spec_mask, FeatureSequence, Labels};
use crate::losses::{cls_loss, log_row, stutter_contrast_loss, total_loss, LossBreakdown, LOG_HEADER};
use crate::mining::{frame_likelihood, MinedFrames};
use crate::model::{Bound, Model};
use crate::tensor::{Tape, Tensor, Var};

/// Clips padded to the longest one, with their true lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// B×T_max×D, zero padded.
    pub features: Tensor,
    pub lengths: Vec<usize>,
    pub labels: Vec<Labels>,
    /// Manifest index of each clip.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn new(items: &[(usize, &FeatureSequence, Labels)]) -> Result<Self> {
        let dim = items
            .first()
            .map(|(_, f, _)| f.dim())
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        if items.iter().any(|(_, f, _)| f.dim() != dim) {
            return Err(Error::shape("batch", "clips have different feature dimensions"));
        }
        let t_max = items.iter().map(|(_, f, _)| f.num_frames()).max().unwrap_or(0);
        let mut data = vec![0.0; items.len() * t_max * dim];
        for (b, (_, f, _)) in items.iter().enumerate() {
            let base = b * t_max * dim;
            for (dst, &src) in data[base..base + f.values().len()].iter_mut().zip(f.values()) {
                *dst = src as f64;
            }
        }
        Ok(Batch {
            features: Tensor::new(vec![items.len(), t_max, dim], data)?,
            lengths: items.iter().map(|(_, f, _)| f.num_frames()).collect(),
            labels: items.iter().map(|(_, _, l)| *l).collect(),
            indices: items.iter().map(|(i, _, _)| *i).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// The true-length T×D slice of clip `b`; padding is dropped here.
    pub fn clip(&self, b: usize) -> Tensor {
        let s = self.features.shape();
        let (t_max, dim) = (s[1], s[2]);
        let start = b * t_max * dim;
        let data = self.features.data()[start..start + self.lengths[b] * dim].to_vec();
        Tensor::matrix(self.lengths[b], dim, data).expect("slice shape")
    }
}

/// Per-clip random stream for frame sampling.
pub fn mining_rng(seed: u64, clip_index: usize, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ clip_index as u64);
    rng.set_stream(epoch as u64);
    rng
}

/// Builds the loss of one clip on `tape`. `features` must already be the
/// true-length slice.
#[allow(clippy::too_many_arguments)]
pub fn clip_objective(
    model: &Model,
    tape: &mut Tape,
    params: &Bound,
    features: Tensor,
    labels: &Labels,
    clip_index: usize,
    epoch: usize,
    config: &TrainConfig,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(Var, LossBreakdown)> {
    let x = tape.constant(features);
    let e = model.encode(tape, params, x, dropout)?;
    let y = model.audio_head(tape, params, e)?;
    let cls = cls_loss(tape, y, labels)?;
    let sides = config.variant.sides();
    let terms = if sides.any() {
        let cas = model.cas_head(tape, params, e)?;
        let p = frame_likelihood(tape, cas)?;
        let p = tape.value(p).data().to_vec();
        let mut rng = mining_rng(config.seed, clip_index, epoch);
        let mined = MinedFrames::mine(tape, e, &p, &config.mining, &mut rng)?;
        let has_stutter = labels.iter().any(|&l| l);
        stutter_contrast_loss(tape, &mined, has_stutter, sides, config.tau)?
    } else {
        Default::default()
    };
    let sc = terms.sum(tape)?;
    let total = total_loss(tape, cls, sc, config.alpha)?;
    let breakdown = LossBreakdown::from_terms(tape, cls, &terms, total);
    Ok((total, breakdown))
}

fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Numerical(_))
}

/// Result of a training run. On a numerical failure `model` is the last
/// parameter set for which every step was finite.
#[derive(Debug)]
pub struct TrainRun {
    pub model: Model,
    pub log: Vec<(usize, LossBreakdown)>,
    pub failure: Option<Error>,
}

impl TrainRun {
    pub fn log_csv(&self) -> String {
        log_csv(&self.log)
    }
}

pub fn log_csv(rows: &[(usize, LossBreakdown)]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for (step, b) in rows {
        out.push_str(&log_row(*step, b));
        out.push('\n');
    }
    out
}

pub fn write_log(path: &Path, rows: &[(usize, LossBreakdown)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(log_csv(rows).as_bytes())?;
    Ok(())
}

pub struct Trainer<'a> {
    config: TrainConfig,
    clips: &'a [Clip],
    model: Model,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    step: usize,
    log: Vec<(usize, LossBreakdown)>,
}

impl<'a> Trainer<'a> {
    /// The model is initialised from `config.seed`, which overrides the
    /// encoder's own seed.
    pub fn new(config: TrainConfig, clips: &'a [Clip]) -> Result<Self> {
        config.validate()?;
        if clips.is_empty() {
            return Err(Error::InvalidArgument("no training clips".into()));
        }
        let want = config.model.encoder.input_dim;
        if let Some(c) = clips.iter().find(|c| c.features.dim() != want) {
            return Err(Error::Config(format!(
                "clip {} has {} feature dims but input_dim = {}",
                c.id,
                c.features.dim(),
                want
            )));
        }
        let mut model_config = config.model.clone();
        model_config.encoder.seed = config.seed;
        let model = Model::new(model_config)?;
        let adam = Adam::new(config.adam, model.params().tensors());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            config,
            clips,
            model,
            adam,
            rng,
            epoch: 0,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &[(usize, LossBreakdown)] {
        &self.log
    }

    pub fn into_run(self, failure: Option<Error>) -> TrainRun {
        TrainRun {
            model: self.model,
            log: self.log,
            failure,
        }
    }

    /// One pass over the clips in a freshly shuffled order. A numerical
    /// failure leaves the parameters of the last finite step in place.
    pub fn run_epoch(&mut self) -> Result<()> {
        let mut order: Vec<usize> = (0..self.clips.len()).collect();
        order.shuffle(&mut self.rng);
        for chunk in order.chunks(self.config.batch_size) {
            self.train_step(chunk)?;
        }
        self.epoch += 1;
        Ok(())
    }

    fn train_step(&mut self, members: &[usize]) -> Result<()> {
        let augmented: Vec<FeatureSequence> = members
            .iter()
            .map(|&i| {
                let f = &self.clips[i].features;
                if self.config.spec_augment {
                    spec_mask(f, &mut self.rng)
                } else {
                    f.clone()
                }
            })
            .collect();
        let items: Vec<(usize, &FeatureSequence, Labels)> = members
            .iter()
            .zip(&augmented)
            .map(|(&i, f)| (self.clips[i].index, f, self.clips[i].labels))
            .collect();
        let batch = Batch::new(&items)?;

        let mut tape = Tape::new();
        let params = self.model.bind(&mut tape);
        let mut totals = Vec::with_capacity(batch.len());
        let mut parts = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            let (total, breakdown) = clip_objective(
                &self.model,
                &mut tape,
                &params,
                batch.clip(b),
                &batch.labels[b],
                batch.indices[b],
                self.epoch,
                &self.config,
                Some(&mut self.rng),
            )?;
            totals.push(total);
            parts.push(breakdown);
        }
        let mut loss = totals[0];
        for &t in &totals[1..] {
            loss = tape.add(loss, t)?;
        }
        let loss = tape.scale(loss, 1.0 / batch.len() as f64)?;
        let grads = tape.backward(loss)?;
        let grads = params.collect(&tape, &grads);
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient at step {}",
                self.step
            )));
        }
        self.adam.step(self.model.params_mut().tensors_mut(), &grads)?;
        self.log.push((self.step, LossBreakdown::mean(&parts)));
        self.step += 1;
        Ok(())
    }
}

/// Runs `config.epochs` epochs. Invalid configurations are errors; numerical
/// failures are reported in [`TrainRun::failure`].
pub fn train(config: &TrainConfig, clips: &[Clip]) -> Result<TrainRun> {
    let mut trainer = Trainer::new(config.clone(), clips)?;
    for _ in 0..config.epochs {
        if let Err(e) = trainer.run_epoch() {
            if is_numerical(&e) {
                return Ok(trainer.into_run(Some(e)));
            }
            return Err(e);
        }
    }
    Ok(trainer.into_run(None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{synth_clip, SyntheticSpec};
    use crate::model::{ClassifierConfig, EncoderConfig, ModelConfig};
    use crate::pipeline::Variant;

    pub(crate) fn small_config(variant: Variant) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            variant,
            model: ModelConfig {
                encoder: EncoderConfig {
                    input_dim: 16,
                    model_dim: 8,
                    n_blocks: 1,
                    n_heads: 2,
                    conv_kernel: 5,
                    ..EncoderConfig::default()
                },
                classifier: ClassifierConfig::default(),
            },
            ..TrainConfig::default()
        }
    }

    pub(crate) fn small_clips(n: usize) -> Vec<Clip> {
        let spec = SyntheticSpec {
            dim: 16,
            min_frames: 20,
            max_frames: 40,
            min_event: 4,
            max_event: 10,
            seed: 5,
            ..SyntheticSpec::default()
        };
        (0..n)
            .map(|i| {
                let c = synth_clip(&spec, i);
                Clip {
                    index: i,
                    id: format!("c{}", i),
                    features: c.features,
                    labels: c.labels,
                }
            })
            .collect()
    }

    #[test]
    fn batch_slices_true_lengths() {
        let clips = small_clips(3);
        let items: Vec<_> = clips.iter().map(|c| (c.index, &c.features, c.labels)).collect();
        let batch = Batch::new(&items).unwrap();
        let t_max = clips.iter().map(|c| c.features.num_frames()).max().unwrap();
        assert_eq!(batch.features.shape(), &[3, t_max, 16]);
        for (b, c) in clips.iter().enumerate() {
            assert_eq!(batch.clip(b), c.features.to_tensor());
        }
    }

    #[test]
    fn padding_does_not_change_the_loss() {
        let clips = small_clips(12);
        let config = small_config(Variant::Fgcl);
        let model = Model::new(config.model.clone()).unwrap();
        for c in clips.iter().filter(|c| c.has_stutter()) {
            let run = |features: Tensor| {
                let mut tape = Tape::new();
                let p = model.bind(&mut tape);
                clip_objective(&model, &mut tape, &p, features, &c.labels, c.index, 1, &config, None)
                    .unwrap()
                    .1
            };
            let plain = run(c.features.to_tensor());
            let padded = c.features.padded(17, 123.0);
            let items = [(c.index, &padded, c.labels), (c.index, &c.features, c.labels)];
            let mut batch = Batch::new(&items).unwrap();
            batch.lengths[0] = c.features.num_frames();
            assert_eq!(run(batch.clip(0)), plain);
            assert_eq!(run(batch.clip(1)), plain);
        }
    }

    #[test]
    fn training_is_deterministic_and_logs_every_step() {
        let clips = small_clips(10);
        let config = small_config(Variant::Fgcl);
        let a = train(&config, &clips).unwrap();
        let b = train(&config, &clips).unwrap();
        assert!(a.failure.is_none());
        assert_eq!(a.log.len(), 2 * 3);
        assert_eq!(a.log_csv(), b.log_csv());
        assert_eq!(a.model.params(), b.model.params());
        assert!(a.log_csv().starts_with(LOG_HEADER));
        for (_, row) in &a.log {
            assert!((row.total - (row.cls + config.alpha * row.sc)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_alpha_matches_baseline() {
        let clips = small_clips(10);
        let base = train(&small_config(Variant::Baseline), &clips).unwrap();
        let mut cfg = small_config(Variant::Fgcl);
        cfg.alpha = 0.0;
        let zero = train(&cfg, &clips).unwrap();
        assert_eq!(base.model.params(), zero.model.params());
        let with = train(&small_config(Variant::Fgcl), &clips).unwrap();
        assert_ne!(base.model.params(), with.model.params());
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let clips = small_clips(2);
        let mut cfg = small_config(Variant::Baseline);
        cfg.model.encoder.input_dim = 80;
        assert!(matches!(Trainer::new(cfg, &clips), Err(Error::Config(_))));
    }

    #[test]
    fn numerical_failure_keeps_last_good_model() {
        let clips = small_clips(4);
        let mut cfg = small_config(Variant::Baseline);
        cfg.adam.lr = 1e300;
        cfg.epochs = 3;
        let run = train(&cfg, &clips).unwrap();
        assert!(run.failure.is_some());
        assert!(run.model.params().tensors().iter().all(|t| t.all_finite()));
    }
}
