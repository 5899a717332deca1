//! Order statistics of parameter tensors: mean, population variance and
//! the 0, 0.25, 0.5, 0.75 and 1 quantiles, seven numbers per tensor.
//!
//! Values are sorted before any accumulation, so the result depends only on
//! the multiset of entries and is bit-identical under any reordering.

use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::netmodels::{Conv1dParams, MhaBlockParams, MlpParams, NetParams};
use crate::numcore::{Tape, Tensor, Var};

pub const STATS_PER_TENSOR: usize = 7;
pub const QUANTILES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Rank positions `(lo, hi, frac)` for quantile `q` of `n` sorted values.
fn quantile_position(q: f64, n: usize) -> (usize, usize, f64) {
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    (lo, hi, pos - lo as f64)
}

fn stats_of_values(values: &[f64]) -> Result<[f64; STATS_PER_TENSOR]> {
    if values.is_empty() {
        return Err(shape_err("statistics of an empty tensor"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let mut out = [mean, var, 0.0, 0.0, 0.0, 0.0, 0.0];
    for (slot, q) in out[2..].iter_mut().zip(QUANTILES) {
        let (lo, hi, frac) = quantile_position(q, sorted.len());
        *slot = if frac == 0.0 { sorted[lo] } else { sorted[lo] + frac * (sorted[hi] - sorted[lo]) };
    }
    Ok(out)
}

/// `(mean, variance, q0, q0.25, q0.5, q0.75, q1)` of all entries.
pub fn tensor_stats(t: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_parts(vec![STATS_PER_TENSOR], stats_of_values(t.data())?.to_vec()))
}

/// Differentiable form of [`tensor_stats`]. Each quantile passes its
/// gradient to the one or two order statistics it interpolates.
pub fn tensor_stats_on_tape(tape: &Tape, t: Var) -> Result<Var> {
    let value = tape.value(t);
    let n = value.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| value.data()[a].total_cmp(&value.data()[b]));

    let flat = tape.reshape(t, &[n])?;
    let mean = tape.mean(flat);
    let centered = tape.sub(flat, tape.broadcast_to(mean, &[n])?)?;
    let var = tape.mean(tape.square(centered));

    let mut lo_idx = Vec::with_capacity(QUANTILES.len());
    let mut hi_idx = Vec::with_capacity(QUANTILES.len());
    let mut weights = Vec::with_capacity(QUANTILES.len());
    for q in QUANTILES {
        let (lo, hi, frac) = quantile_position(q, n);
        lo_idx.push(order[lo]);
        hi_idx.push(order[hi]);
        weights.push(frac);
    }
    let k = QUANTILES.len();
    let lo = tape.gather(flat, Rc::from(lo_idx), &[k])?;
    let hi = tape.gather(flat, Rc::from(hi_idx), &[k])?;
    let w = tape.leaf(Tensor::from_parts(vec![k], weights));
    let quant = tape.add(lo, tape.mul(w, tape.sub(hi, lo)?)?)?;
    tape.concat(&[mean, var, quant])
}

fn concat_stats<'a>(tensors: impl IntoIterator<Item = &'a [f64]>) -> Result<Tensor> {
    let mut out = Vec::new();
    for t in tensors {
        out.extend(stats_of_values(t)?);
    }
    let n = out.len();
    Ok(Tensor::from_parts(vec![n], out))
}

/// Weight then bias statistics per layer: `14 * L` values.
pub fn mlp_stat_features(params: &MlpParams) -> Tensor {
    concat_stats(params.layers().iter().flat_map(|l| [l.weight.data(), l.bias.data()])).expect("layers are non-empty")
}

/// Filter then bias statistics per layer: `14 * L` values.
pub fn conv_stat_features(params: &Conv1dParams) -> Tensor {
    concat_stats(params.layers().iter().flat_map(|l| [l.filter.data(), l.bias.data()])).expect("layers are non-empty")
}

/// Statistics of the query, key, value and output projections (all heads
/// pooled per role), then `W_A, b_A, W_B, b_B` when a feedforward is present:
/// 56 values with a feedforward, 28 without.
pub fn mha_stat_features(params: &MhaBlockParams) -> Tensor {
    let mut pooled: Vec<Vec<f64>> =
        (0..4).map(|role| params.heads().iter().flat_map(|h| h.get(role).data().iter().copied()).collect()).collect();
    if let Some(ff) = params.feedforward() {
        pooled.extend([&ff.w_a, &ff.b_a, &ff.w_b, &ff.b_b].map(|t| t.data().to_vec()));
    }
    concat_stats(pooled.iter().map(Vec::as_slice)).expect("projections are non-empty")
}

pub fn stat_features(params: &NetParams) -> Tensor {
    match params {
        NetParams::Mlp(p) => mlp_stat_features(p),
        NetParams::Conv1d(p) => conv_stat_features(p),
        NetParams::Mha(p) => mha_stat_features(p),
    }
}

/// Length of [`stat_features`] for a network of the given shape.
pub fn stat_len(params: &NetParams) -> usize {
    match params {
        NetParams::Mlp(p) => 2 * STATS_PER_TENSOR * p.num_layers(),
        NetParams::Conv1d(p) => 2 * STATS_PER_TENSOR * p.layers().len(),
        NetParams::Mha(p) => STATS_PER_TENSOR * if p.feedforward().is_some() { 8 } else { 4 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, GRAD_CHECK_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stats(v: &[f64]) -> Vec<f64> {
        tensor_stats(&Tensor::vector(v.to_vec()).unwrap()).unwrap().into_data()
    }

    #[test]
    fn constant_and_singleton() {
        assert_eq!(stats(&[2.5; 6]), vec![2.5, 0.0, 2.5, 2.5, 2.5, 2.5, 2.5]);
        assert_eq!(stats(&[-4.0]), vec![-4.0, 0.0, -4.0, -4.0, -4.0, -4.0, -4.0]);
    }

    #[test]
    fn one_to_five() {
        assert_eq!(stats(&[5.0, 1.0, 4.0, 2.0, 3.0]), vec![3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn interpolated_quantiles() {
        // n = 4: q0.25 sits at rank 0.75, q0.5 at 1.5, q0.75 at 2.25
        let s = stats(&[0.0, 10.0, 20.0, 40.0]);
        assert_eq!(&s[2..], &[0.0, 7.5, 15.0, 25.0, 40.0]);
    }

    #[test]
    fn layout_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = MlpParams::random(&[3, 4], 1.0, &mut rng).unwrap();
        assert_eq!(mlp_stat_features(&mlp).len(), 14);
        let with_ff = MhaBlockParams::random(8, 4, 2, Some(8), 1.0, &mut rng).unwrap();
        assert_eq!(mha_stat_features(&with_ff).len(), 56);
        let bare = MhaBlockParams::random(8, 4, 2, None, 1.0, &mut rng).unwrap();
        assert_eq!(mha_stat_features(&bare).len(), 28);
        for p in [NetParams::from(mlp), with_ff.into(), bare.into()] {
            assert_eq!(stat_features(&p).len(), stat_len(&p));
        }
    }

    #[test]
    fn empty_rejected() {
        assert!(stats_of_values(&[]).is_err());
    }

    #[test]
    fn tape_version_matches_and_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = crate::netmodels::mlp::gaussian(&[3, 5], 1.0, &mut rng);
        let tape = Tape::new();
        let v = tape.leaf(t.clone());
        let s = tape.value(tensor_stats_on_tape(&tape, v).unwrap());
        let plain = tensor_stats(&t).unwrap();
        assert!(s.max_abs_diff(&plain).unwrap() < 1e-14);
        let w = Tensor::vector(vec![0.3, -1.2, 0.7, 2.0, -0.4, 1.1, 0.9]).unwrap();
        let err = grad_check(
            |tape, x| {
                let s = tensor_stats_on_tape(tape, x)?;
                let w = tape.leaf(w.clone());
                Ok(tape.sum(tape.mul(s, w)?))
            },
            &t,
            GRAD_CHECK_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
