//! Training, inference, evaluation and ablation.

pub mod ablate;
pub mod bench;
pub mod diagnostics;
pub mod eval;
pub mod infer;
pub mod optim;
pub mod train;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub use ablate::{ablate, AblationGrid, AblationRow, AblationTable};
pub use eval::{evaluate, ClassStats, EvalReport};
pub use infer::{apply_thresholds, infer, InferOutcome, Prediction};
pub use optim::{Adam, AdamConfig};
pub use train::{train, Batch, TrainRun, Trainer};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::features::{read_features, ClipRecord, FeatureSequence, Labels};
use crate::losses::ContrastSides;
use crate::mining::{self, MiningConfig};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Classification loss only.
    Baseline,
    /// Both contrast halves.
    Fgcl,
    /// Stuttered half only.
    FgclStOnly,
    /// Fluent half only.
    FgclFlOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::FgclFlOnly,
        Variant::FgclStOnly,
        Variant::Fgcl,
    ];

    pub fn sides(self) -> ContrastSides {
        match self {
            Variant::Baseline => ContrastSides::NONE,
            Variant::Fgcl => ContrastSides::BOTH,
            Variant::FgclStOnly => ContrastSides {
                stuttered: true,
                fluent: false,
            },
            Variant::FgclFlOnly => ContrastSides {
                stuttered: false,
                fluent: true,
            },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Fgcl => "fgcl",
            Variant::FgclStOnly => "fgcl_st_only",
            Variant::FgclFlOnly => "fgcl_fl_only",
        }
    }

    /// Row label in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::Fgcl => "+L_fl+L_st",
            Variant::FgclStOnly => "+L_st",
            Variant::FgclFlOnly => "+L_fl",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant {:?}", s))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub alpha: f64,
    pub tau: f64,
    pub mining: MiningConfig,
    pub variant: Variant,
    pub spec_augment: bool,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            adam: AdamConfig::default(),
            alpha: 0.05,
            tau: 0.07,
            mining: MiningConfig::default(),
            variant: Variant::Fgcl,
            spec_augment: true,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "alpha",
    "tau",
    "variant",
    "spec_augment",
    "seed",
    "input_dim",
    "model_dim",
    "n_blocks",
    "n_heads",
    "conv_kernel",
    "ffn_mult",
    "dropout",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad(format!("invalid optimizer settings {:?}", a));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        self.mining.validate()?;
        self.model.validate()
    }

    /// Applies `key = value` overrides on top of `self`.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        let known: Vec<&str> = TRAIN_KEYS.iter().chain(mining::KEYS).copied().collect();
        kv.reject_unknown(&known)?;
        kv.apply("epochs", &mut self.epochs)?;
        kv.apply("batch_size", &mut self.batch_size)?;
        kv.apply("lr", &mut self.adam.lr)?;
        kv.apply("beta1", &mut self.adam.beta1)?;
        kv.apply("beta2", &mut self.adam.beta2)?;
        kv.apply("adam_eps", &mut self.adam.eps)?;
        kv.apply("alpha", &mut self.alpha)?;
        kv.apply("tau", &mut self.tau)?;
        kv.apply("variant", &mut self.variant)?;
        kv.apply("spec_augment", &mut self.spec_augment)?;
        kv.apply("seed", &mut self.seed)?;
        let e = &mut self.model.encoder;
        kv.apply("input_dim", &mut e.input_dim)?;
        kv.apply("model_dim", &mut e.model_dim)?;
        kv.apply("n_blocks", &mut e.n_blocks)?;
        kv.apply("n_heads", &mut e.n_heads)?;
        kv.apply("conv_kernel", &mut e.conv_kernel)?;
        kv.apply("ffn_mult", &mut e.ffn_mult)?;
        kv.apply("dropout", &mut e.dropout)?;
        self.mining.apply(kv)?;
        self.validate()
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply(kv)?;
        Ok(c)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("epochs", self.epochs);
        kv.insert("batch_size", self.batch_size);
        kv.insert("lr", self.adam.lr);
        kv.insert("beta1", self.adam.beta1);
        kv.insert("beta2", self.adam.beta2);
        kv.insert("adam_eps", self.adam.eps);
        kv.insert("alpha", self.alpha);
        kv.insert("tau", self.tau);
        kv.insert("variant", self.variant);
        kv.insert("spec_augment", self.spec_augment);
        kv.insert("seed", self.seed);
        let e = &self.model.encoder;
        kv.insert("input_dim", e.input_dim);
        kv.insert("model_dim", e.model_dim);
        kv.insert("n_blocks", e.n_blocks);
        kv.insert("n_heads", e.n_heads);
        kv.insert("conv_kernel", e.conv_kernel);
        kv.insert("ffn_mult", e.ffn_mult);
        kv.insert("dropout", e.dropout);
        let m = &self.mining;
        kv.insert("theta", m.theta);
        kv.insert("m", m.inner_mask);
        kv.insert("M", m.outer_mask);
        kv.insert("gamma_c", m.confusing_ratio);
        kv.insert("gamma_e", m.easy_ratio);
        kv
    }
}

/// A loaded training or test clip. `index` is the clip's position in its
/// manifest and keys its mining random stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub index: usize,
    pub id: String,
    pub features: FeatureSequence,
    pub labels: Labels,
}

impl Clip {
    pub fn has_stutter(&self) -> bool {
        self.labels.iter().any(|&l| l)
    }
}

/// Reads every feature file referenced by `records`.
pub fn load_clips(records: &[ClipRecord]) -> Result<Vec<Clip>> {
    records
        .iter()
        .enumerate()
        .map(|(index, r)| {
            Ok(Clip {
                index,
                id: r.id.clone(),
                features: read_features(&r.feature_path)?,
                labels: r.labels,
            })
        })
        .collect()
}

/// Reads a manifest and all of its feature files.
pub fn load_manifest_clips(path: &Path) -> Result<Vec<Clip>> {
    let records = crate::features::read_manifest(path)?;
    if records.is_empty() {
        return Err(Error::Manifest(format!("{} has no clips", path.display())));
    }
    load_clips(&records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_text() {
        let mut c = TrainConfig {
            variant: Variant::FgclStOnly,
            alpha: 0.25,
            ..TrainConfig::default()
        };
        c.mining.inner_mask = 1;
        let kv = KeyValues::parse(&c.to_key_values().to_text()).unwrap();
        assert_eq!(TrainConfig::from_key_values(&kv).unwrap(), c);
    }

    #[test]
    fn config_rejects_bad_values() {
        for text in ["m = 6\nM = 6", "alpha = -1", "variant = other", "epochs = 0", "bogus = 1", "tau = 0"] {
            let kv = KeyValues::parse(text).unwrap();
            assert!(TrainConfig::from_key_values(&kv).is_err(), "{}", text);
        }
    }

    #[test]
    fn variants_parse() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!(!Variant::Baseline.sides().any());
        assert_eq!(Variant::Fgcl.sides(), ContrastSides::BOTH);
    }
}
