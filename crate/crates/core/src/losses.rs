//! Clip classification loss, stutter contrast loss and their combination.

use std::fmt;

use crate::error::{Error, Result};
use crate::features::Labels;
use crate::mining::MinedFrames;
use crate::tensor::{Tape, Tensor, Var};
use crate::NUM_CLASSES;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-12;

/// Mean per-class binary cross-entropy of sigmoided clip scores `y` (length C).
pub fn cls_loss(tape: &mut Tape, y: Var, gt: &Labels) -> Result<Var> {
    if tape.value(y).shape() != [NUM_CLASSES] {
        return Err(Error::shape(
            "cls_loss",
            format!("expected {} probabilities, got {:?}", NUM_CLASSES, tape.value(y).shape()),
        ));
    }
    let pos: Vec<f64> = gt.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
    let neg: Vec<f64> = pos.iter().map(|g| 1.0 - g).collect();
    let pos = tape.constant(Tensor::vector(pos));
    let neg = tape.constant(Tensor::vector(neg));

    let y = tape.clamp(y, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_y = tape.log(y)?;
    let one_minus = tape.scale(y, -1.0)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    let log_1my = tape.log(one_minus)?;
    let a = tape.mul(pos, log_y)?;
    let b = tape.mul(neg, log_1my)?;
    let ll = tape.add(a, b)?;
    let s = tape.sum_all(ll)?;
    tape.scale(s, -1.0 / NUM_CLASSES as f64)
}

/// InfoNCE for `queries` (k_q×d) against the re-normalised mean of the
/// normalised `positives` (k⁺×d) and each of the `negatives` (k⁻×d), with
/// cosine similarities divided by `tau`. Averaged over queries.
pub fn contrast_side(
    tape: &mut Tape,
    queries: Var,
    positives: Var,
    negatives: Var,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {}", tau)));
    }
    for (name, v) in [("queries", queries), ("positives", positives), ("negatives", negatives)] {
        let s = tape.value(v).shape();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::shape("contrast_side", format!("{} must be k×d with k >= 1, got {:?}", name, s)));
        }
    }
    let d = tape.value(queries).cols();
    let k_q = tape.value(queries).rows();

    let q = tape.normalize_rows(queries)?;
    let p = tape.normalize_rows(positives)?;
    let p = tape.mean(p, 0)?;
    let p = tape.reshape(p, &[1, d])?;
    let p = tape.normalize_rows(p)?;
    let n = tape.normalize_rows(negatives)?;

    let pt = tape.transpose(p)?;
    let s_pos = tape.matmul(q, pt)?;
    let nt = tape.transpose(n)?;
    let s_neg = tape.matmul(q, nt)?;
    let logits = tape.concat_cols(&[s_pos, s_neg])?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    let ls = tape.log_softmax_rows(logits)?;
    let first = tape.slice_cols(ls, 0, 1)?;
    let s = tape.sum_all(first)?;
    tape.scale(s, -1.0 / k_q as f64)
}

/// Which halves of the contrast loss are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContrastSides {
    pub stuttered: bool,
    pub fluent: bool,
}

impl ContrastSides {
    pub const BOTH: ContrastSides = ContrastSides {
        stuttered: true,
        fluent: true,
    };
    pub const NONE: ContrastSides = ContrastSides {
        stuttered: false,
        fluent: false,
    };

    pub fn any(self) -> bool {
        self.stuttered || self.fluent
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SkipReason {
    NoStutterLabel,
    EmptyConfusingStuttered,
    EmptyConfusingFluent,
    EmptyConfusingBoth,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::NoStutterLabel => "no_stutter_label",
            SkipReason::EmptyConfusingStuttered => "empty_confusing_stuttered",
            SkipReason::EmptyConfusingFluent => "empty_confusing_fluent",
            SkipReason::EmptyConfusingBoth => "empty_confusing_both",
        }
    }
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Graph nodes of the two contrast halves. A missing half contributes 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct ContrastTerms {
    pub stuttered: Option<Var>,
    pub fluent: Option<Var>,
    pub skipped: Option<SkipReason>,
}

impl ContrastTerms {
    /// `L_st + L_fl` as a node, or `None` when both halves are absent.
    pub fn sum(&self, tape: &mut Tape) -> Result<Option<Var>> {
        match (self.stuttered, self.fluent) {
            (Some(a), Some(b)) => tape.add(a, b).map(Some),
            (Some(a), None) | (None, Some(a)) => Ok(Some(a)),
            (None, None) => Ok(None),
        }
    }
}

/// Stuttered half: confusing stuttered queries, easy stuttered positives,
/// easy fluent negatives. The fluent half mirrors it.
pub fn stutter_contrast_loss(
    tape: &mut Tape,
    mined: &MinedFrames,
    has_stutter: bool,
    sides: ContrastSides,
    tau: f64,
) -> Result<ContrastTerms> {
    if !has_stutter {
        return Ok(ContrastTerms {
            skipped: Some(SkipReason::NoStutterLabel),
            ..ContrastTerms::default()
        });
    }
    let es = mined.easy_stuttered_emb;
    let ef = mined.easy_fluent_emb;
    let side = |tape: &mut Tape, q: Option<Var>, pos: Option<Var>, neg: Option<Var>| {
        match (q, pos, neg) {
            (Some(q), Some(p), Some(n)) => contrast_side(tape, q, p, n, tau).map(Some),
            _ => Ok(None),
        }
    };
    let stuttered = if sides.stuttered {
        side(tape, mined.confusing_stuttered_emb, es, ef)?
    } else {
        None
    };
    let fluent = if sides.fluent {
        side(tape, mined.confusing_fluent_emb, ef, es)?
    } else {
        None
    };
    let st_missing = sides.stuttered && stuttered.is_none();
    let fl_missing = sides.fluent && fluent.is_none();
    let skipped = match (st_missing, fl_missing) {
        (true, true) => Some(SkipReason::EmptyConfusingBoth),
        (true, false) => Some(SkipReason::EmptyConfusingStuttered),
        (false, true) => Some(SkipReason::EmptyConfusingFluent),
        (false, false) => None,
    };
    Ok(ContrastTerms {
        stuttered,
        fluent,
        skipped,
    })
}

/// `cls + alpha · contrast`; `contrast = None` means the contrast term is 0.
pub fn total_loss(tape: &mut Tape, cls: Var, contrast: Option<Var>, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {}", alpha)));
    }
    match contrast {
        Some(sc) => {
            let w = tape.scale(sc, alpha)?;
            tape.add(cls, w)
        }
        None => Ok(cls),
    }
}

/// Scalar loss values for logging.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub st: f64,
    pub fl: f64,
    pub sc: f64,
    pub total: f64,
    pub skipped: Vec<SkipReason>,
}

impl LossBreakdown {
    pub fn from_terms(tape: &Tape, cls: Var, terms: &ContrastTerms, total: Var) -> Self {
        let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        let st = val(terms.stuttered);
        let fl = val(terms.fluent);
        LossBreakdown {
            cls: tape.value(cls).item(),
            st,
            fl,
            sc: st + fl,
            total: tape.value(total).item(),
            skipped: terms.skipped.into_iter().collect(),
        }
    }

    /// Mean of the numeric fields; skip reasons are concatenated.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            cls: avg(|b| b.cls),
            st: avg(|b| b.st),
            fl: avg(|b| b.fl),
            sc: avg(|b| b.sc),
            total: avg(|b| b.total),
            skipped: items.iter().flat_map(|b| b.skipped.iter().copied()).collect(),
        }
    }

    /// `reason:count` pairs joined by `;`, sorted by reason.
    pub fn skipped_summary(&self) -> String {
        let mut counts = std::collections::BTreeMap::new();
        for r in &self.skipped {
            *counts.entry(*r).or_insert(0usize) += 1;
        }
        counts
            .iter()
            .map(|(r, c)| format!("{}:{}", r, c))
            .collect::<Vec<_>>()
            .join(";")
    }
}

pub const LOG_HEADER: &str = "step,L_cls,L_st,L_fl,L_SC,total,skipped_reason";

/// One training-log row. Floats use Rust's shortest round-trip formatting.
pub fn log_row(step: usize, b: &LossBreakdown) -> String {
    format!(
        "{},{:?},{:?},{:?},{:?},{:?},{}",
        step,
        b.cls,
        b.st,
        b.fl,
        b.sc,
        b.total,
        b.skipped_summary()
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::MiningConfig;
    use crate::tensor::gradcheck::{check, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn eval_cls(y: &[f64], gt: &Labels) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(y.to_vec()));
        let l = cls_loss(&mut tape, v, gt).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn cls_loss_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((eval_cls(&[0.5; 5], &[true, false, true, false, false]) - ln2).abs() < 1e-15);
        let gt = [true, false, false, true, false];
        let exact: Vec<f64> = gt.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
        assert!(eval_cls(&exact, &gt) < 1e-11);

        let y = [0.1f64, 0.8, 0.35, 0.6, 0.99];
        let by_hand: f64 = y
            .iter()
            .zip(&gt)
            .map(|(&p, &g)| if g { -p.ln() } else { -(1.0 - p).ln() })
            .sum::<f64>()
            / 5.0;
        assert!((eval_cls(&y, &gt) - by_hand).abs() < 1e-14);
    }

    #[test]
    fn cls_loss_gradient() {
        let y = Tensor::vector(vec![0.1, 0.8, 0.35, 0.6, 0.9]);
        let gt = [true, false, false, true, false];
        let r = check(&[y], |t, v| cls_loss(t, v[0], &gt), DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error() < 1e-6);
    }

    fn side_value(q: &Tensor, p: &Tensor, n: &Tensor, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let (q, p, n) = (
            tape.constant(q.clone()),
            tape.constant(p.clone()),
            tape.constant(n.clone()),
        );
        let l = contrast_side(&mut tape, q, p, n, tau).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn contrast_anchors() {
        let row = vec![0.3, -1.2, 0.7, 2.0];
        for k_neg in 1..5 {
            let rows = |k: usize| Tensor::from_rows(&vec![row.clone(); k]).unwrap();
            let l = side_value(&rows(2), &rows(3), &rows(k_neg), 0.07);
            assert!((l - (1.0 + k_neg as f64).ln()).abs() < 1e-9, "{} {}", k_neg, l);
        }
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let n = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let l = side_value(&q, &q, &n, 0.07);
        let expected = (-1.0f64 / 0.07).exp().ln_1p();
        assert!((l - expected).abs() < 1e-9);
        assert!((l - expected).abs() / expected < 1e-6);
    }

    #[test]
    fn contrast_monotone_in_similarities() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let at = |deg: f64| {
            let r = deg.to_radians();
            Tensor::from_rows(&[vec![r.cos(), r.sin()]]).unwrap()
        };
        let mut prev = 0.0;
        for deg in [180.0, 135.0, 90.0, 45.0, 10.0] {
            let l = side_value(&q, &at(20.0), &at(deg), 0.07);
            assert!(l >= prev, "negative at {} deg", deg);
            prev = l;
        }
        let mut prev = f64::INFINITY;
        for deg in [170.0, 120.0, 60.0, 0.0] {
            let l = side_value(&q, &at(deg), &at(90.0), 0.07);
            assert!(l <= prev, "positive at {} deg", deg);
            prev = l;
        }
        assert!(side_value(&random(3, 4, 1), &random(2, 4, 2), &random(5, 4, 3), 0.5) >= 0.0);
    }

    #[test]
    fn contrast_gradient() {
        let inputs = [random(2, 4, 11), random(2, 4, 12), random(3, 4, 13)];
        let r = check(&inputs, |t, v| contrast_side(t, v[0], v[1], v[2], 0.07), DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error() < 1e-4, "{:?}", r.rel_errors);
    }

    fn mined(tape: &mut Tape, cs: Option<usize>, cf: Option<usize>) -> MinedFrames {
        let e = tape.leaf(random(8, 4, 5));
        let mut g = |i: Option<usize>| i.map(|i| tape.gather_rows(e, &[i, (i + 1) % 8]).unwrap());
        MinedFrames {
            confusing_stuttered_emb: g(cs),
            confusing_fluent_emb: g(cf),
            easy_stuttered_emb: g(Some(3)),
            easy_fluent_emb: g(Some(6)),
            ..MinedFrames::default()
        }
    }

    #[test]
    fn contrast_loss_composition() {
        let mut tape = Tape::new();
        let m = mined(&mut tape, Some(0), Some(5));
        let terms = stutter_contrast_loss(&mut tape, &m, true, ContrastSides::BOTH, 0.07).unwrap();
        assert_eq!(terms.skipped, None);
        let st = contrast_side(
            &mut tape,
            m.confusing_stuttered_emb.unwrap(),
            m.easy_stuttered_emb.unwrap(),
            m.easy_fluent_emb.unwrap(),
            0.07,
        )
        .unwrap();
        let fl = contrast_side(
            &mut tape,
            m.confusing_fluent_emb.unwrap(),
            m.easy_fluent_emb.unwrap(),
            m.easy_stuttered_emb.unwrap(),
            0.07,
        )
        .unwrap();
        let sc = terms.sum(&mut tape).unwrap().unwrap();
        let expected = tape.value(st).item() + tape.value(fl).item();
        assert_eq!(tape.value(sc).item(), expected);

        let m = mined(&mut tape, None, Some(5));
        let terms = stutter_contrast_loss(&mut tape, &m, true, ContrastSides::BOTH, 0.07).unwrap();
        assert_eq!(terms.skipped, Some(SkipReason::EmptyConfusingStuttered));
        let sc = terms.sum(&mut tape).unwrap().unwrap();
        assert_eq!(sc, terms.fluent.unwrap());

        let terms = stutter_contrast_loss(&mut tape, &m, false, ContrastSides::BOTH, 0.07).unwrap();
        assert_eq!(terms.skipped, Some(SkipReason::NoStutterLabel));
        assert!(terms.sum(&mut tape).unwrap().is_none());

        let m = mined(&mut tape, Some(0), Some(5));
        let only = ContrastSides {
            stuttered: true,
            fluent: false,
        };
        let terms = stutter_contrast_loss(&mut tape, &m, true, only, 0.07).unwrap();
        assert!(terms.fluent.is_none() && terms.stuttered.is_some() && terms.skipped.is_none());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new();
        let cls = tape.constant(Tensor::scalar(0.6931));
        let sc = tape.constant(Tensor::scalar(0.6931));
        let t = total_loss(&mut tape, cls, Some(sc), 0.05).unwrap();
        assert!((tape.value(t).item() - 0.727755).abs() < 1e-12);
        let t = total_loss(&mut tape, cls, Some(sc), 0.0).unwrap();
        assert_eq!(tape.value(t).item(), 0.6931);
        assert!(total_loss(&mut tape, cls, Some(sc), -1.0).is_err());
    }

    #[test]
    fn zero_alpha_leaves_gradients_unchanged() {
        let embeddings = random(6, 5, 9);
        let grads = |alpha: Option<f64>| {
            let mut tape = Tape::new();
            let e = tape.leaf(embeddings.clone());
            let pooled = tape.mean(e, 0).unwrap();
            let y = tape.sigmoid(pooled).unwrap();
            let cls = cls_loss(&mut tape, y, &[true, false, true, false, false]).unwrap();
            let total = match alpha {
                Some(a) => {
                    let cfg = MiningConfig::default();
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let p = [0.9, 0.8, 0.7, 0.2, 0.1, 0.05];
                    let m = MinedFrames::mine(&mut tape, e, &p, &cfg, &mut rng).unwrap();
                    let terms =
                        stutter_contrast_loss(&mut tape, &m, true, ContrastSides::BOTH, 0.07).unwrap();
                    let sc = terms.sum(&mut tape).unwrap();
                    assert!(sc.is_some());
                    total_loss(&mut tape, cls, sc, a).unwrap()
                }
                None => cls,
            };
            let g = tape.backward(total).unwrap();
            (tape.value(total).item(), g.get(e).unwrap().clone())
        };
        let (base_v, base_g) = grads(None);
        let (v0, g0) = grads(Some(0.0));
        assert_eq!(base_v.to_bits(), v0.to_bits());
        assert_eq!(base_g, g0);
        let (_, g1) = grads(Some(0.05));
        assert_ne!(base_g, g1);
    }

    #[test]
    fn log_rows() {
        let b = LossBreakdown {
            cls: 0.5,
            st: 0.25,
            fl: 0.0,
            sc: 0.25,
            total: 0.5125,
            skipped: vec![SkipReason::NoStutterLabel, SkipReason::EmptyConfusingFluent, SkipReason::NoStutterLabel],
        };
        assert_eq!(
            log_row(3, &b),
            "3,0.5,0.25,0.0,0.25,0.5125,no_stutter_label:2;empty_confusing_fluent:1"
        );
        let m = LossBreakdown::mean(&[b.clone(), LossBreakdown::default()]);
        assert_eq!(m.cls, 0.25);
        assert_eq!(m.skipped.len(), 3);
    }
}
