//! Grid ablation over variants and mining settings.

use super::eval::{evaluate_model, markdown_header, markdown_row, EvalReport};
use super::infer::DEFAULT_THRESHOLD;
use super::{train, Clip, TrainConfig, Variant};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::{CLASS_NAMES, NUM_CLASSES};

/// Values to sweep. An empty axis keeps the base configuration's value and
/// is not shown as a column.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationGrid {
    pub variants: Vec<Variant>,
    /// `(m, M)` pairs.
    pub masks: Vec<(usize, usize)>,
    pub gamma_c: Vec<usize>,
    pub gamma_e: Vec<usize>,
    pub alpha: Vec<f64>,
    pub theta: Vec<f64>,
}

const GRID_KEYS: &[&str] = &["variants", "masks", "gamma_c", "gamma_e", "alpha", "theta"];

impl AblationGrid {
    /// Rows of the component ablation: baseline, fluent half, stuttered half, both.
    pub fn components() -> Self {
        AblationGrid {
            variants: Variant::ALL.to_vec(),
            ..Default::default()
        }
    }

    /// Rows of the cascaded-mining ablation.
    pub fn cascade() -> Self {
        AblationGrid {
            masks: vec![(1, 6), (1, 4), (3, 6)],
            ..Default::default()
        }
    }

    /// Keys: `variants`, `masks` (`m:M` pairs), `gamma_c`, `gamma_e`,
    /// `alpha`, `theta`; all comma separated.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(GRID_KEYS)?;
        let masks = match kv.get("masks") {
            None => Vec::new(),
            Some(v) => v
                .split(',')
                .map(|pair| {
                    let (a, b) = pair
                        .trim()
                        .split_once(':')
                        .ok_or_else(|| Error::Config(format!("mask pair {:?} is not m:M", pair)))?;
                    let parse = |s: &str| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|e| Error::Config(format!("mask pair {:?}: {}", pair, e)))
                    };
                    Ok((parse(a)?, parse(b)?))
                })
                .collect::<Result<_>>()?,
        };
        Ok(AblationGrid {
            variants: kv.list("variants")?.unwrap_or_default(),
            masks,
            gamma_c: kv.list("gamma_c")?.unwrap_or_default(),
            gamma_e: kv.list("gamma_e")?.unwrap_or_default(),
            alpha: kv.list("alpha")?.unwrap_or_default(),
            theta: kv.list("theta")?.unwrap_or_default(),
        })
    }

    fn columns(&self) -> Vec<&'static str> {
        let mut cols = Vec::new();
        if !self.variants.is_empty() {
            cols.push("Method");
        }
        if !self.masks.is_empty() {
            cols.extend(["m", "M"]);
        }
        for (name, axis_len) in [
            ("gamma_c", self.gamma_c.len()),
            ("gamma_e", self.gamma_e.len()),
            ("alpha", self.alpha.len()),
            ("theta", self.theta.len()),
        ] {
            if axis_len > 0 {
                cols.push(name);
            }
        }
        cols
    }

    /// Cartesian product of the axes in declaration order, with the
    /// settings shown for each cell.
    pub fn cells(&self, base: &TrainConfig) -> Vec<(Vec<String>, TrainConfig)> {
        let mut cells = vec![(Vec::new(), base.clone())];
        fn expand<T: Copy>(
            cells: Vec<(Vec<String>, TrainConfig)>,
            axis: &[T],
            show: impl Fn(T) -> Vec<String>,
            set: impl Fn(&mut TrainConfig, T),
        ) -> Vec<(Vec<String>, TrainConfig)> {
            if axis.is_empty() {
                return cells;
            }
            let mut out = Vec::with_capacity(cells.len() * axis.len());
            for (shown, cfg) in cells {
                for &v in axis {
                    let mut s = shown.clone();
                    s.extend(show(v));
                    let mut c = cfg.clone();
                    set(&mut c, v);
                    out.push((s, c));
                }
            }
            out
        }
        cells = expand(cells, &self.variants, |v| vec![v.label().into()], |c, v| c.variant = v);
        cells = expand(
            cells,
            &self.masks,
            |(m, big)| vec![m.to_string(), big.to_string()],
            |c, (m, big)| {
                c.mining.inner_mask = m;
                c.mining.outer_mask = big;
            },
        );
        cells = expand(cells, &self.gamma_c, |v| vec![v.to_string()], |c, v| c.mining.confusing_ratio = v);
        cells = expand(cells, &self.gamma_e, |v| vec![v.to_string()], |c, v| c.mining.easy_ratio = v);
        cells = expand(cells, &self.alpha, |v| vec![v.to_string()], |c, v| c.alpha = v);
        cells = expand(cells, &self.theta, |v| vec![v.to_string()], |c, v| c.mining.theta = v);
        cells
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub settings: Vec<String>,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// F1 in percent.
    pub fn to_markdown(&self) -> String {
        let cols: Vec<&str> = self.columns.iter().map(String::as_str).collect();
        let mut out = markdown_header(&cols);
        for r in &self.rows {
            out.push_str(&markdown_row(&r.settings, &r.report));
        }
        out
    }

    /// F1 as fractions.
    pub fn to_csv(&self) -> String {
        let header: Vec<String> = self
            .columns
            .iter()
            .cloned()
            .chain(CLASS_NAMES.iter().map(|s| s.to_string()))
            .chain(["Avg".to_string()])
            .collect();
        let mut out = header.join(",");
        out.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r
                .settings
                .iter()
                .cloned()
                .chain(r.report.f1_row().iter().map(|v| format!("{:.6}", v)))
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Trains every cell of `grid` on `train_clips` with the base seed and
/// evaluates on `test_clips` at the default thresholds.
pub fn ablate(
    base: &TrainConfig,
    grid: &AblationGrid,
    train_clips: &[Clip],
    test_clips: &[Clip],
) -> Result<AblationTable> {
    let thresholds = [DEFAULT_THRESHOLD; NUM_CLASSES];
    let mut rows = Vec::new();
    for (settings, config) in grid.cells(base) {
        config.validate()?;
        let run = train(&config, train_clips)?;
        if let Some(e) = run.failure {
            return Err(e);
        }
        let report = evaluate_model(&run.model, test_clips, &thresholds)?;
        rows.push(AblationRow { settings, report });
    }
    Ok(AblationTable {
        columns: grid.columns().into_iter().map(String::from).collect(),
        rows,
    })
}
