//! Per-class and macro F1.

use std::collections::BTreeMap;

use super::infer::Prediction;
use crate::error::{Error, Result};
use crate::features::{ClipRecord, Labels};
use crate::{CLASS_NAMES, NUM_CLASSES};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassStats {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// The class was neither present nor predicted, so F1 is 0/0 (reported as 0).
    pub undefined: bool,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl ClassStats {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassStats {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
            undefined: tp + fp + fn_ == 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: [ClassStats; NUM_CLASSES],
    /// Unweighted mean of the five class F1 scores.
    pub macro_f1: f64,
    pub n_clips: usize,
}

impl EvalReport {
    pub fn from_pairs(pairs: &[(Labels, Labels)]) -> Self {
        let mut counts = [(0usize, 0usize, 0usize); NUM_CLASSES];
        for (truth, pred) in pairs {
            for c in 0..NUM_CLASSES {
                match (truth[c], pred[c]) {
                    (true, true) => counts[c].0 += 1,
                    (false, true) => counts[c].1 += 1,
                    (true, false) => counts[c].2 += 1,
                    (false, false) => {}
                }
            }
        }
        let classes = counts.map(|(tp, fp, fn_)| ClassStats::from_counts(tp, fp, fn_));
        let macro_f1 = classes.iter().map(|c| c.f1).sum::<f64>() / NUM_CLASSES as f64;
        EvalReport {
            classes,
            macro_f1,
            n_clips: pairs.len(),
        }
    }

    pub fn f1_row(&self) -> [f64; NUM_CLASSES + 1] {
        let mut row = [0.0; NUM_CLASSES + 1];
        for (r, c) in row.iter_mut().zip(&self.classes) {
            *r = c.f1;
        }
        row[NUM_CLASSES] = self.macro_f1;
        row
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,tp,fp,fn,precision,recall,f1,undefined\n");
        for (name, c) in CLASS_NAMES.iter().zip(&self.classes) {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{}\n",
                name, c.tp, c.fp, c.fn_, c.precision, c.recall, c.f1, c.undefined
            ));
        }
        out.push_str(&format!("Avg,,,,,,{:.6},\n", self.macro_f1));
        out
    }

    /// F1 in percent, one row, with `/p /b /r /wr /i Avg` columns.
    pub fn to_markdown(&self, label: &str) -> String {
        let mut out = markdown_header(&["Method"]);
        out.push_str(&markdown_row(&[label.to_string()], self));
        let undefined: Vec<&str> = CLASS_NAMES
            .iter()
            .zip(&self.classes)
            .filter(|(_, c)| c.undefined)
            .map(|(n, _)| *n)
            .collect();
        if !undefined.is_empty() {
            out.push_str(&format!(
                "\nF1 undefined (no positives, no predictions), counted as 0: {}\n",
                undefined.join(", ")
            ));
        }
        out
    }
}

pub(crate) fn markdown_header(leading: &[&str]) -> String {
    let cols: Vec<&str> = leading
        .iter()
        .copied()
        .chain(CLASS_NAMES)
        .chain(["Avg"])
        .collect();
    format!(
        "| {} |\n|{}\n",
        cols.join(" | "),
        "---|".repeat(cols.len())
    )
}

pub(crate) fn markdown_row(leading: &[String], report: &EvalReport) -> String {
    let cells: Vec<String> = leading
        .iter()
        .cloned()
        .chain(report.f1_row().iter().map(|v| format!("{:.2}", 100.0 * v)))
        .collect();
    format!("| {} |\n", cells.join(" | "))
}

/// Scores `predictions` against `truth`; the two id sets must be equal.
pub fn evaluate(predictions: &[Prediction], truth: &[ClipRecord]) -> Result<EvalReport> {
    let mut by_id = BTreeMap::new();
    for p in predictions {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate prediction for {}", p.id)));
        }
    }
    let missing: Vec<&str> = truth
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    let truth_ids: std::collections::BTreeSet<&str> = truth.iter().map(|r| r.id.as_str()).collect();
    let extra: Vec<&str> = by_id.keys().copied().filter(|id| !truth_ids.contains(id)).collect();
    if !missing.is_empty() || !extra.is_empty() || truth_ids.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "id mismatch: {} without prediction {:?}, {} unknown {:?}",
            missing.len(),
            missing.iter().take(5).collect::<Vec<_>>(),
            extra.len(),
            extra.iter().take(5).collect::<Vec<_>>()
        )));
    }
    let pairs: Vec<(Labels, Labels)> = truth
        .iter()
        .map(|r| Ok((r.labels, by_id[r.id.as_str()].labels()?)))
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_pairs(&pairs))
}

/// Predicts every clip with `model` and scores the result.
pub fn evaluate_model(
    model: &crate::model::Model,
    clips: &[super::Clip],
    thresholds: &[f64; NUM_CLASSES],
) -> Result<EvalReport> {
    let pairs = clips
        .iter()
        .map(|c| {
            let scores = model.predict(&c.features.to_tensor())?;
            Ok((c.labels, super::infer::apply_thresholds(&scores, thresholds)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_pairs(&pairs))
}
