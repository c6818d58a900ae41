//! JSON-lines clip manifests.
//!
//! One object per line:
//! `{"id": .., "feature_path": .., "labels": [5 × 0/1], "frame_truth": [[start, len], ..]}`
//! where `frame_truth` is optional. Relative feature paths resolve against the
//! manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::NUM_CLASSES;

/// Clip-level stutter labels ordered `/p, /b, /r, /wr, /i`.
pub type Labels = [bool; NUM_CLASSES];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipRecord {
    pub id: String,
    pub feature_path: PathBuf,
    pub labels: Labels,
    /// Event spans as `(start, len)` runs, synthetic data only.
    pub frame_truth: Option<Vec<(usize, usize)>>,
}

impl ClipRecord {
    pub fn has_stutter(&self) -> bool {
        self.labels.iter().any(|&l| l)
    }

    /// Expands `frame_truth` into a per-frame mask of length `frames`.
    pub fn frame_mask(&self, frames: usize) -> Option<Vec<bool>> {
        let runs = self.frame_truth.as_ref()?;
        let mut mask = vec![false; frames];
        for &(start, len) in runs {
            for m in mask.iter_mut().skip(start).take(len) {
                *m = true;
            }
        }
        Some(mask)
    }
}

#[derive(Serialize, Deserialize)]
struct Line {
    id: String,
    feature_path: String,
    labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame_truth: Option<Vec<[usize; 2]>>,
}

/// Collapses a boolean mask into `(start, len)` runs of `true`.
pub fn run_length_encode(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut t = 0;
    while t < mask.len() {
        if mask[t] {
            let start = t;
            while t < mask.len() && mask[t] {
                t += 1;
            }
            runs.push((start, t - start));
        } else {
            t += 1;
        }
    }
    runs
}

pub fn labels_to_ints(labels: &Labels) -> Vec<u8> {
    labels.iter().map(|&b| b as u8).collect()
}

pub fn labels_from_ints(v: &[u8]) -> Result<Labels> {
    if v.len() != NUM_CLASSES {
        return Err(Error::Manifest(format!(
            "expected {} labels, got {}",
            NUM_CLASSES,
            v.len()
        )));
    }
    let mut out = [false; NUM_CLASSES];
    for (o, &x) in out.iter_mut().zip(v) {
        *o = match x {
            0 => false,
            1 => true,
            _ => return Err(Error::Manifest(format!("label value {} is not 0/1", x))),
        };
    }
    Ok(out)
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ClipRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(line)
            .map_err(|e| Error::Manifest(format!("line {}: {}", n + 1, e)))?;
        let labels =
            labels_from_ints(&l.labels).map_err(|e| Error::Manifest(format!("line {}: {}", n + 1, e)))?;
        let p = PathBuf::from(&l.feature_path);
        let feature_path = if p.is_absolute() { p } else { base.join(p) };
        out.push(ClipRecord {
            id: l.id,
            feature_path,
            labels,
            frame_truth: l
                .frame_truth
                .map(|runs| runs.into_iter().map(|[s, len]| (s, len)).collect()),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Manifest(format!("{}: {}", path.display(), e)))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base)
}

/// Writes records; feature paths under the manifest directory are stored relative.
pub fn write_manifest(path: &Path, records: &[ClipRecord]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut text = String::new();
    for r in records {
        let rel = r
            .feature_path
            .strip_prefix(base)
            .unwrap_or(&r.feature_path)
            .to_string_lossy()
            .into_owned();
        let line = Line {
            id: r.id.clone(),
            feature_path: rel,
            labels: labels_to_ints(&r.labels),
            frame_truth: r
                .frame_truth
                .as_ref()
                .map(|runs| runs.iter().map(|&(s, l)| [s, l]).collect()),
        };
        text.push_str(&serde_json::to_string(&line)?);
        text.push('\n');
    }
    super::io::write_atomic(path, text.as_bytes())
}
