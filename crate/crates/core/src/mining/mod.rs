//! Frame likelihood and confusing/easy frame mining.
//!
//! Selection works on detached probability values; only the gathered
//! embeddings stay on the tape.

pub mod check;
pub mod morphology;

use rand::seq::index;
use rand::Rng;

pub use morphology::{dilate, erode};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MiningConfig {
    /// Binarization threshold; `p ≥ theta` counts as stuttered.
    pub theta: f64,
    /// Inner (smaller) mask length.
    pub inner_mask: usize,
    /// Outer (larger) mask length.
    pub outer_mask: usize,
    pub confusing_ratio: usize,
    pub easy_ratio: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            theta: 0.5,
            inner_mask: 3,
            outer_mask: 6,
            confusing_ratio: 10,
            easy_ratio: 20,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad(format!("theta must lie in (0, 1), got {}", self.theta));
        }
        if self.inner_mask == 0 || self.inner_mask >= self.outer_mask {
            return bad(format!(
                "need 1 <= m < M, got m={} M={}",
                self.inner_mask, self.outer_mask
            ));
        }
        if self.confusing_ratio == 0 || self.easy_ratio == 0 {
            return bad("gamma_c and gamma_e must be >= 1".into());
        }
        Ok(())
    }

    /// Reads `theta`, `m`, `M`, `gamma_c`, `gamma_e` where present.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.apply("theta", &mut self.theta)?;
        kv.apply("m", &mut self.inner_mask)?;
        kv.apply("M", &mut self.outer_mask)?;
        kv.apply("gamma_c", &mut self.confusing_ratio)?;
        kv.apply("gamma_e", &mut self.easy_ratio)?;
        Ok(())
    }
}

pub const KEYS: &[&str] = &["theta", "m", "M", "gamma_c", "gamma_e"];

/// `max(1, ⌊frames / ratio⌋)`
pub fn sample_count(frames: usize, ratio: usize) -> usize {
    (frames / ratio).max(1)
}

/// `sigmoid(Σ_c cas[t, c])` for every frame, differentiable.
pub fn frame_likelihood(tape: &mut Tape, cas: Var) -> Result<Var> {
    let s = tape.sum(cas, 1)?;
    tape.sigmoid(s)
}

/// Heaviside step with `p == theta` mapped to 1.
pub fn binarize(p: &[f64], theta: f64) -> Vec<bool> {
    p.iter().map(|&v| v >= theta).collect()
}

fn positions(mask: impl Iterator<Item = bool>) -> Vec<usize> {
    mask.enumerate().filter(|(_, v)| *v).map(|(i, _)| i).collect()
}

/// Candidate frames `(stuttered, fluent)` before sampling: the ring removed
/// between erosion by `inner` and by `outer`, and the ring added between
/// dilation by `inner` and by `outer`.
pub fn confusing_candidates(b: &[bool], inner: usize, outer: usize) -> (Vec<usize>, Vec<usize>) {
    let (ei, eo) = (erode(b, inner), erode(b, outer));
    let (di, dout) = (dilate(b, inner), dilate(b, outer));
    let st = positions(ei.iter().zip(&eo).map(|(&a, &b)| a && !b));
    let fl = positions(dout.iter().zip(&di).map(|(&a, &b)| a && !b));
    (st, fl)
}

/// Uniform sample of `min(k, |candidates|)` without replacement, in ascending order.
pub fn sample_without_replacement<R: Rng + ?Sized>(
    candidates: &[usize],
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let amount = k.min(candidates.len());
    if amount == candidates.len() {
        return candidates.to_vec();
    }
    let mut out: Vec<usize> = index::sample(rng, candidates.len(), amount)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    out.sort_unstable();
    out
}

/// Sampled confusing `(stuttered, fluent)` indices, at most `kᶜ` each.
pub fn mine_confusing<R: Rng + ?Sized>(
    b: &[bool],
    config: &MiningConfig,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    config.validate()?;
    let (st, fl) = confusing_candidates(b, config.inner_mask, config.outer_mask);
    let k = sample_count(b.len(), config.confusing_ratio);
    let st = sample_without_replacement(&st, k, rng);
    let fl = sample_without_replacement(&fl, k, rng);
    Ok((st, fl))
}

/// Top-`kᵉ` and bottom-`kᵉ` indices of `p`, in rank order, ties to the lower index.
pub fn mine_easy(p: &[f64], easy_ratio: usize) -> (Vec<usize>, Vec<usize>) {
    if p.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let k = sample_count(p.len(), easy_ratio).min(p.len());
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&i, &j| p[j].total_cmp(&p[i]).then(i.cmp(&j)));
    let top = order[..k].to_vec();
    order.sort_by(|&i, &j| p[i].total_cmp(&p[j]).then(i.cmp(&j)));
    let bottom = order[..k].to_vec();
    (top, bottom)
}

/// Mined indices and the matching rows of the embedding matrix.
#[derive(Clone, Debug, Default)]
pub struct MinedFrames {
    pub confusing_stuttered: Vec<usize>,
    pub confusing_fluent: Vec<usize>,
    pub easy_stuttered: Vec<usize>,
    pub easy_fluent: Vec<usize>,
    pub confusing_stuttered_emb: Option<Var>,
    pub confusing_fluent_emb: Option<Var>,
    pub easy_stuttered_emb: Option<Var>,
    pub easy_fluent_emb: Option<Var>,
}

impl MinedFrames {
    /// Selects frames from detached probabilities `p` and gathers the
    /// corresponding rows of `embeddings` (T×d).
    pub fn mine<R: Rng + ?Sized>(
        tape: &mut Tape,
        embeddings: Var,
        p: &[f64],
        config: &MiningConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if tape.value(embeddings).rows() != p.len() {
            return Err(Error::shape(
                "mine",
                format!(
                    "{} probabilities for {} embedding rows",
                    p.len(),
                    tape.value(embeddings).rows()
                ),
            ));
        }
        let b = binarize(p, config.theta);
        let (cs, cf) = mine_confusing(&b, config, rng)?;
        let (es, ef) = mine_easy(p, config.easy_ratio);
        Self::from_indices(tape, embeddings, cs, cf, es, ef)
    }

    /// Gathers rows for already selected indices.
    pub fn from_indices(
        tape: &mut Tape,
        embeddings: Var,
        confusing_stuttered: Vec<usize>,
        confusing_fluent: Vec<usize>,
        easy_stuttered: Vec<usize>,
        easy_fluent: Vec<usize>,
    ) -> Result<Self> {
        let mut gather = |idx: &[usize]| -> Result<Option<Var>> {
            if idx.is_empty() {
                Ok(None)
            } else {
                tape.gather_rows(embeddings, idx).map(Some)
            }
        };
        Ok(MinedFrames {
            confusing_stuttered_emb: gather(&confusing_stuttered)?,
            confusing_fluent_emb: gather(&confusing_fluent)?,
            easy_stuttered_emb: gather(&easy_stuttered)?,
            easy_fluent_emb: gather(&easy_fluent)?,
            confusing_stuttered,
            confusing_fluent,
            easy_stuttered,
            easy_fluent,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask(s: &str) -> Vec<bool> {
        s.chars().map(|c| c == '1').collect()
    }

    #[test]
    fn likelihood_values() {
        let mut tape = Tape::new();
        let cas = tape.constant(
            Tensor::from_rows(&[vec![0.0; 5], vec![1.0; 5], vec![1.0, 2.0, -3.0, 0.5, 0.0]]).unwrap(),
        );
        let p = frame_likelihood(&mut tape, cas).unwrap();
        let p = tape.value(p).data();
        assert_eq!(p[0], 0.5);
        assert!((p[1] - 0.993_307_149_075_715_2).abs() < 1e-12);
        assert!((p[2] - 1.0 / (1.0 + (-0.5f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn binarize_boundary() {
        assert_eq!(binarize(&[0.2, 0.7], 0.5), vec![false, true]);
        assert_eq!(binarize(&[0.5], 0.5), vec![true]);
        assert!(binarize(&[0.1, 0.49], 0.5).iter().all(|&b| !b));
    }

    #[test]
    fn confusing_worked_example() {
        let (st, fl) = confusing_candidates(&mask("000111111000"), 3, 6);
        assert_eq!(st, vec![4, 6, 7]);
        assert_eq!(fl, vec![1, 10, 11]);
        let (st, fl) = confusing_candidates(&mask("000000000000"), 3, 6);
        assert!(st.is_empty() && fl.is_empty());
    }

    #[test]
    fn all_ones_gives_edge_rings() {
        let b = vec![true; 12];
        let (st, fl) = confusing_candidates(&b, 3, 6);
        // erode 3 keeps [1,10], erode 6 keeps [2,8]
        assert_eq!(st, vec![1, 9, 10]);
        assert!(fl.is_empty());
    }

    #[test]
    fn invalid_masks_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = MiningConfig {
            inner_mask: 6,
            outer_mask: 6,
            ..MiningConfig::default()
        };
        assert!(mine_confusing(&[true], &c, &mut rng).is_err());
    }

    #[test]
    fn easy_examples() {
        assert_eq!(mine_easy(&[0.9, 0.1, 0.8, 0.2], 20), (vec![0], vec![1]));
        assert_eq!(mine_easy(&[0.3; 6], 20), (vec![0], vec![0]));
        let p: Vec<f64> = (0..40).map(|i| (i % 7) as f64).collect();
        let (top, bottom) = mine_easy(&p, 20);
        assert_eq!(top, vec![6, 13]);
        assert_eq!(bottom, vec![0, 7]);
    }

    #[test]
    fn sample_counts() {
        assert_eq!(sample_count(5, 10), 1);
        assert_eq!(sample_count(29, 10), 2);
        assert_eq!(sample_count(100, 20), 5);
    }

    #[test]
    fn mine_gathers_rows() {
        let mut tape = Tape::new();
        let t = 40;
        let e = tape.leaf(Tensor::matrix(t, 2, (0..2 * t).map(|i| i as f64).collect()).unwrap());
        let p: Vec<f64> = (0..t).map(|i| if (10..30).contains(&i) { 0.9 } else { 0.1 }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MinedFrames::mine(&mut tape, e, &p, &MiningConfig::default(), &mut rng).unwrap();
        assert_eq!(m.confusing_stuttered.len(), 3);
        assert_eq!(m.confusing_fluent.len(), 3);
        assert_eq!(m.easy_stuttered, vec![10, 11]);
        assert_eq!(m.easy_fluent, vec![0, 1]);
        let g = tape.value(m.confusing_stuttered_emb.unwrap());
        for (r, &i) in m.confusing_stuttered.iter().enumerate() {
            assert_eq!(g.row(r), &[2.0 * i as f64, 2.0 * i as f64 + 1.0]);
        }
        let fluent = vec![0.1; t];
        let m = MinedFrames::mine(&mut tape, e, &fluent, &MiningConfig::default(), &mut rng).unwrap();
        assert!(m.confusing_stuttered_emb.is_none() && m.confusing_fluent_emb.is_none());
    }

    proptest! {
        #[test]
        fn mined_sets_respect_mask(p in prop::collection::vec(0.0f64..1.0, 1..300), seed in any::<u64>()) {
            let cfg = MiningConfig::default();
            let b = binarize(&p, cfg.theta);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (st, fl) = mine_confusing(&b, &cfg, &mut rng).unwrap();
            let kc = sample_count(p.len(), cfg.confusing_ratio);
            prop_assert!(st.len() <= kc && fl.len() <= kc);
            prop_assert!(st.iter().all(|&t| b[t]));
            prop_assert!(fl.iter().all(|&t| !b[t]));
            let (es, ef) = mine_easy(&p, cfg.easy_ratio);
            let ke = sample_count(p.len(), cfg.easy_ratio);
            prop_assert_eq!(es.len(), ke);
            prop_assert_eq!(ef.len(), ke);
        }
    }
}
