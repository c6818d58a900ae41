//! 1-D binary erosion and dilation.
//!
//! For mask length `l` let `a = ⌊(l−1)/2⌋` and `b = ⌈(l−1)/2⌉`. Erosion takes
//! the minimum over `[t−a, t+b]`, dilation the maximum over the reflected
//! window `[t−b, t+a]`. Positions outside the sequence count as 0, so `l = 1`
//! is the identity for both.

/// Minimum (`max == false`) or maximum over `[t − before, t + after]` for
/// every `t`, with zeros outside the sequence. Runs in O(T) regardless of
/// window length using block prefix and suffix scans.
fn running_extreme(b: &[bool], before: usize, after: usize, max: bool) -> Vec<bool> {
    let t_len = b.len();
    if t_len == 0 {
        return Vec::new();
    }
    let l = before + after + 1;
    let n = t_len + before + after;
    let op = |x: bool, y: bool| if max { x || y } else { x && y };
    let x = |i: usize| i >= before && i - before < t_len && b[i - before];

    let mut prefix = vec![false; n];
    for i in 0..n {
        prefix[i] = if i % l == 0 { x(i) } else { op(prefix[i - 1], x(i)) };
    }
    let mut suffix = vec![false; n];
    for i in (0..n).rev() {
        suffix[i] = if i % l == l - 1 || i == n - 1 {
            x(i)
        } else {
            op(suffix[i + 1], x(i))
        };
    }
    (0..t_len).map(|t| op(suffix[t], prefix[t + l - 1])).collect()
}

fn halves(l: usize) -> (usize, usize) {
    assert!(l >= 1, "mask length must be >= 1");
    ((l - 1) / 2, l / 2)
}

/// Contraction with mask length `l ≥ 1`.
pub fn erode(b: &[bool], l: usize) -> Vec<bool> {
    let (lo, hi) = halves(l);
    running_extreme(b, lo, hi, false)
}

/// Expansion with mask length `l ≥ 1`.
pub fn dilate(b: &[bool], l: usize) -> Vec<bool> {
    let (lo, hi) = halves(l);
    running_extreme(b, hi, lo, true)
}

/// Direct O(T·l) window scans, kept as reference implementations for
/// `stutterkit mine --check`.
pub mod naive {
    fn scan(b: &[bool], before: usize, after: usize, max: bool) -> Vec<bool> {
        let t_len = b.len() as isize;
        (0..t_len)
            .map(|t| {
                let mut acc = !max;
                for s in t - before as isize..=t + after as isize {
                    let v = s >= 0 && s < t_len && b[s as usize];
                    acc = if max { acc || v } else { acc && v };
                }
                acc
            })
            .collect()
    }

    pub fn erode(b: &[bool], l: usize) -> Vec<bool> {
        scan(b, (l - 1) / 2, l / 2, false)
    }

    pub fn dilate(b: &[bool], l: usize) -> Vec<bool> {
        scan(b, l / 2, (l - 1) / 2, true)
    }
}
