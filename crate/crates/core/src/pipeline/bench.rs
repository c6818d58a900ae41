//! Synthetic train/test benchmark comparing the baseline with contrast training.

use super::eval::{evaluate_model, EvalReport};
use super::infer::DEFAULT_THRESHOLD;
use super::{train, Clip, TrainConfig, Variant};
use crate::error::Result;
use crate::features::{synth_clip, SyntheticSpec};
use crate::NUM_CLASSES;

/// Clips `0..n_train` for training and `n_train..n_train + n_test` for
/// testing, all drawn from `spec`.
pub fn synthetic_split(spec: &SyntheticSpec, n_train: usize, n_test: usize) -> Result<(Vec<Clip>, Vec<Clip>)> {
    spec.validate()?;
    let make = |i: usize, index: usize| {
        let c = synth_clip(spec, i);
        Clip {
            index,
            id: format!("clip_{:05}", i),
            features: c.features,
            labels: c.labels,
        }
    };
    let train = (0..n_train).map(|i| make(i, i)).collect();
    let test = (n_train..n_train + n_test).map(|i| make(i, i - n_train)).collect();
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub baseline: EvalReport,
    pub fgcl: EvalReport,
}

/// Generates data with `spec.seed = seed`, then trains and evaluates the
/// baseline and `base.variant` with `base.seed = seed`.
pub fn run_seed(
    base: &TrainConfig,
    spec: &SyntheticSpec,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<SeedResult> {
    let spec = SyntheticSpec { seed, ..spec.clone() };
    let (train_clips, test_clips) = synthetic_split(&spec, n_train, n_test)?;
    let thresholds = [DEFAULT_THRESHOLD; NUM_CLASSES];
    let eval_variant = |variant: Variant| -> Result<EvalReport> {
        let cfg = TrainConfig {
            variant,
            seed,
            ..base.clone()
        };
        let run = train(&cfg, &train_clips)?;
        if let Some(e) = run.failure {
            return Err(e);
        }
        evaluate_model(&run.model, &test_clips, &thresholds)
    };
    let baseline = eval_variant(Variant::Baseline)?;
    let fgcl = eval_variant(base.variant)?;
    Ok(SeedResult { seed, baseline, fgcl })
}
