//! Equivalence of the running filters with the direct window scans.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::morphology::{dilate, erode, naive};

/// Mask lengths checked by default.
pub const CHECK_LENGTHS: [usize; 5] = [1, 2, 3, 6, 9];

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OracleReport {
    pub exhaustive_cases: u64,
    pub random_cases: u64,
    pub mismatches: u64,
    /// First mismatching `(sequence, mask length)`, if any.
    pub first_mismatch: Option<(Vec<bool>, usize)>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }

    fn compare(&mut self, b: &[bool], l: usize) {
        if erode(b, l) != naive::erode(b, l) || dilate(b, l) != naive::dilate(b, l) {
            self.mismatches += 1;
            if self.first_mismatch.is_none() {
                self.first_mismatch = Some((b.to_vec(), l));
            }
        }
    }
}

/// Every binary sequence with `1 ≤ T ≤ max_exhaustive` for each of `lengths`,
/// then `random_cases` random sequences with `T ≤ max_random` and a random
/// length from `lengths`.
pub fn oracle_check(
    lengths: &[usize],
    max_exhaustive: usize,
    random_cases: u64,
    max_random: usize,
    seed: u64,
) -> OracleReport {
    let mut report = OracleReport::default();
    for t in 1..=max_exhaustive {
        for bits in 0u64..1 << t {
            let b: Vec<bool> = (0..t).map(|i| bits >> i & 1 == 1).collect();
            for &l in lengths {
                report.compare(&b, l);
                report.exhaustive_cases += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..random_cases {
        let t = rng.gen_range(1..=max_random);
        let density: f64 = rng.gen();
        let b: Vec<bool> = (0..t).map(|_| rng.gen::<f64>() < density).collect();
        let l = lengths[rng.gen_range(0..lengths.len())];
        report.compare(&b, l);
        report.random_cases += 1;
    }
    report
}
