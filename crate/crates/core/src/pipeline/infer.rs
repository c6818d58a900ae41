//! Clip-level inference with per-class thresholds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{read_features, ClipRecord, Labels};
use crate::model::Model;
use crate::NUM_CLASSES;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Class `c` is predicted iff `scores[c] > thresholds[c]`.
pub fn apply_thresholds(scores: &[f64], thresholds: &[f64; NUM_CLASSES]) -> Labels {
    let mut out = [false; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        out[c] = scores[c] > thresholds[c];
    }
    out
}

pub fn validate_thresholds(thresholds: &[f64; NUM_CLASSES]) -> Result<()> {
    if thresholds.iter().any(|t| !(0.0..1.0).contains(t)) {
        return Err(Error::Config(format!("thresholds must lie in [0, 1), got {:?}", thresholds)));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub scores: Vec<f64>,
    pub pred: Vec<u8>,
}

impl Prediction {
    pub fn labels(&self) -> Result<Labels> {
        crate::features::manifest::labels_from_ints(&self.pred)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InferOutcome {
    pub predictions: Vec<Prediction>,
    /// `(id, reason)` for clips whose features could not be read.
    pub skipped: Vec<(String, String)>,
}

pub fn predict_one(model: &Model, id: &str, features: &crate::tensor::Tensor, thresholds: &[f64; NUM_CLASSES]) -> Result<Prediction> {
    let scores = model.predict(features)?;
    let pred = apply_thresholds(&scores, thresholds);
    Ok(Prediction {
        id: id.to_string(),
        scores,
        pred: pred.iter().map(|&b| b as u8).collect(),
    })
}

/// Scores every clip in `records`. Unreadable feature files are skipped with
/// a warning on stderr and listed in the outcome.
pub fn infer(model: &Model, records: &[ClipRecord], thresholds: &[f64; NUM_CLASSES]) -> Result<InferOutcome> {
    validate_thresholds(thresholds)?;
    let mut out = InferOutcome::default();
    for r in records {
        let features = match read_features(&r.feature_path) {
            Ok(f) => f,
            Err(e) => {
                eprintln!("warning: skipping {}: {}", r.id, e);
                out.skipped.push((r.id.clone(), e.to_string()));
                continue;
            }
        };
        out.predictions.push(predict_one(model, &r.id, &features.to_tensor(), thresholds)?);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut text = String::new();
    for p in predictions {
        text.push_str(&serde_json::to_string(p)?);
        text.push('\n');
    }
    crate::features::io::write_atomic(path, text.as_bytes())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Manifest(format!("{}: {}", path.display(), e)))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let p: Prediction = serde_json::from_str(l)
                .map_err(|e| Error::Manifest(format!("{} line {}: {}", path.display(), n + 1, e)))?;
            if p.scores.len() != NUM_CLASSES {
                return Err(Error::Manifest(format!("{} line {}: expected {} scores", path.display(), n + 1, NUM_CLASSES)));
            }
            p.labels()?;
            Ok(p)
        })
        .collect()
}
