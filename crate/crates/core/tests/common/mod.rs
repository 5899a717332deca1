//! Independent reference implementations used by the integration tests.

#![allow(dead_code)]

use weightsym::netmodels::MhaBlockParams;
use weightsym::Tensor;

/// Tau-b by explicit pair counting.
pub fn kendall_brute(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut s, mut tx, mut ty, mut pairs) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            pairs += 1;
            let dx = x[i].partial_cmp(&x[j]).unwrap() as i64;
            let dy = y[i].partial_cmp(&y[j]).unwrap() as i64;
            if dx == 0 {
                tx += 1;
            }
            if dy == 0 {
                ty += 1;
            }
            s += dx * dy;
        }
    }
    if tx == pairs || ty == pairs {
        return 0.0;
    }
    s as f64 / (((pairs - tx) as f64) * ((pairs - ty) as f64)).sqrt()
}

/// Mean, population variance and linearly interpolated quartiles from a
/// plain sort.
pub fn stats_oracle(values: &[f64]) -> [f64; 7] {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let q = |p: f64| {
        let pos = p * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        if frac == 0.0 {
            v[lo]
        } else {
            v[lo] + frac * (v[lo + 1] - v[lo])
        }
    };
    [mean, var, q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)]
}

/// Attention block forward written with scalar loops only.
pub fn mha_oracle(p: &MhaBlockParams, x: &Tensor) -> Vec<Vec<f64>> {
    let l = x.shape()[0];
    let d = x.shape()[1];
    let dh = p.head_dim();
    let xi = |t: usize, k: usize| x.data()[t * d + k];
    let at = |m: &Tensor, r: usize, c: usize| m.data()[r * m.shape()[1] + c];
    let temp = if p.scaled_attention { 1.0 / (dh as f64).sqrt() } else { 1.0 };
    let mut out = vec![vec![0.0; d]; l];
    for h in p.heads() {
        let proj = |w: &Tensor| -> Vec<Vec<f64>> {
            (0..l).map(|t| (0..dh).map(|c| (0..d).map(|k| xi(t, k) * at(w, k, c)).sum()).collect()).collect()
        };
        let (q, k, v) = (proj(&h.query), proj(&h.key), proj(&h.value));
        for t in 0..l {
            let logits: Vec<f64> = (0..l).map(|s| temp * (0..dh).map(|c| q[t][c] * k[s][c]).sum::<f64>()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mixed: Vec<f64> = (0..dh).map(|c| (0..l).map(|s| e[s] / z * v[s][c]).sum()).collect();
            for (j, o) in out[t].iter_mut().enumerate() {
                *o += (0..dh).map(|c| mixed[c] * at(&h.output, j, c)).sum::<f64>();
            }
        }
    }
    let Some(ff) = p.feedforward() else {
        return out;
    };
    let df = ff.b_a.len();
    out.iter()
        .map(|m| {
            let hidden: Vec<f64> = (0..df)
                .map(|i| ((0..d).map(|k| at(&ff.w_a, i, k) * m[k]).sum::<f64>() + ff.b_a.data()[i]).max(0.0))
                .collect();
            (0..d).map(|j| (0..df).map(|i| at(&ff.w_b, j, i) * hidden[i]).sum::<f64>() + ff.b_b.data()[j]).collect()
        })
        .collect()
}
