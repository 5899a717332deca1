//! Kendall's tau-b rank correlation, computed in O(n log n) with Knight's
//! merge-sort algorithm.

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KendallTau {
    pub tau: f64,
    /// Set when either input is constant; `tau` is then 0.
    pub degenerate: bool,
}

fn tied_pairs(sorted: &[f64]) -> i64 {
    let mut total = 0i64;
    let mut run = 1i64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Stable merge sort of `v` by value, returning the number of inversions.
fn sort_counting_swaps(v: &mut [f64], buf: &mut [f64]) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (left, right) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        sort_counting_swaps(left, bl) + sort_counting_swaps(right, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as i64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    let k = k + mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Tie-corrected Kendall tau (tau-b) between two equal-length lists.
pub fn kendall_tau(pred: &[f64], target: &[f64]) -> Result<KendallTau> {
    if pred.len() != target.len() {
        return Err(shape_err(format!("kendall tau over lists of length {} and {}", pred.len(), target.len())));
    }
    if pred.len() < 2 {
        return Err(Error::InvalidArgument("kendall tau needs at least two items".into()));
    }
    if pred.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kendall tau input".into()));
    }
    let n = pred.len() as i64;
    let n0 = n * (n - 1) / 2;

    let mut pairs: Vec<(f64, f64)> = pred.iter().copied().zip(target.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let n1 = tied_pairs(&xs);

    let mut n3 = 0i64;
    let mut run = 1i64;
    for w in pairs.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            n3 += run * (run - 1) / 2;
            run = 1;
        }
    }
    n3 += run * (run - 1) / 2;

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; ys.len()];
    let swaps = sort_counting_swaps(&mut ys, &mut buf);
    let n2 = tied_pairs(&ys);

    if n0 == n1 || n0 == n2 {
        return Ok(KendallTau { tau: 0.0, degenerate: true });
    }
    let numerator = n0 - n1 - n2 + n3 - 2 * swaps;
    let tau = numerator as f64 / (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt();
    Ok(KendallTau { tau, degenerate: false })
}
