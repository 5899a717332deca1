use rand::Rng;

use super::mlp::gaussian;
use crate::error::{shape_err, Result};
use crate::numcore::Tensor;

/// Projections of one attention head, each `[d, d_h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProj {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
}

impl HeadProj {
    pub fn get(&self, role: usize) -> &Tensor {
        match role {
            0 => &self.query,
            1 => &self.key,
            2 => &self.value,
            _ => &self.output,
        }
    }
}

pub const HEAD_ROLES: [&str; 4] = ["query", "key", "value", "output"];

/// Per-token ReLU feedforward `m -> W_B relu(W_A m + b_A) + b_B`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w_a: Tensor,
    pub b_a: Tensor,
    pub w_b: Tensor,
    pub b_b: Tensor,
}

/// A multihead attention block, optionally followed by a feedforward.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaBlockParams {
    heads: Vec<HeadProj>,
    feedforward: Option<FeedForward>,
    /// Divide attention logits by `sqrt(d_h)`. Off by default.
    pub scaled_attention: bool,
}

impl MhaBlockParams {
    pub fn new(heads: Vec<HeadProj>, feedforward: Option<FeedForward>) -> Result<Self> {
        let Some(first) = heads.first() else {
            return Err(shape_err("an attention block needs at least one head"));
        };
        let shape = first.query.shape().to_vec();
        if shape.len() != 2 {
            return Err(shape_err(format!("head projection shape {shape:?}")));
        }
        for (i, h) in heads.iter().enumerate() {
            for (role, name) in HEAD_ROLES.iter().enumerate() {
                if h.get(role).shape() != shape.as_slice() {
                    return Err(shape_err(format!(
                        "head {} {name} has shape {:?}, expected {shape:?}",
                        i + 1,
                        h.get(role).shape()
                    )));
                }
            }
        }
        if let Some(ff) = &feedforward {
            let d = shape[0];
            let (df, din) = ff.w_a.expect_matrix("feedforward W_A")?;
            let ok = din == d && ff.b_a.shape() == [df] && ff.w_b.shape() == [d, df] && ff.b_b.shape() == [d];
            if !ok {
                return Err(shape_err(format!("feedforward shapes do not fit model width {d}")));
            }
        }
        Ok(Self { heads, feedforward, scaled_attention: false })
    }

    pub fn random(
        d: usize,
        d_h: usize,
        h: usize,
        d_f: Option<usize>,
        init_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if d == 0 || d_h == 0 || h == 0 {
            return Err(shape_err(format!("attention dims d={d}, d_h={d_h}, h={h}")));
        }
        let std = init_scale / (d as f64).sqrt();
        let heads = (0..h)
            .map(|_| HeadProj {
                query: gaussian(&[d, d_h], std, rng),
                key: gaussian(&[d, d_h], std, rng),
                value: gaussian(&[d, d_h], std, rng),
                output: gaussian(&[d, d_h], std, rng),
            })
            .collect();
        let feedforward = match d_f {
            Some(0) => return Err(shape_err("feedforward width must be positive")),
            Some(df) => Some(FeedForward {
                w_a: gaussian(&[df, d], std, rng),
                b_a: gaussian(&[df], 0.1 * init_scale, rng),
                w_b: gaussian(&[d, df], init_scale / (df as f64).sqrt(), rng),
                b_b: gaussian(&[d], 0.1 * init_scale, rng),
            }),
            None => None,
        };
        Self::new(heads, feedforward)
    }

    pub fn heads(&self) -> &[HeadProj] {
        &self.heads
    }

    pub(crate) fn heads_mut(&mut self) -> &mut Vec<HeadProj> {
        &mut self.heads
    }

    pub fn feedforward(&self) -> Option<&FeedForward> {
        self.feedforward.as_ref()
    }

    pub(crate) fn feedforward_mut(&mut self) -> Option<&mut FeedForward> {
        self.feedforward.as_mut()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn model_dim(&self) -> usize {
        self.heads[0].query.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].query.shape()[1]
    }

    pub fn ff_dim(&self) -> Option<usize> {
        self.feedforward.as_ref().map(|f| f.w_a.shape()[0])
    }

    /// `[d, d_h, h]` followed by `d_f` when a feedforward is present.
    pub fn dims(&self) -> Vec<usize> {
        let mut v = vec![self.model_dim(), self.head_dim(), self.num_heads()];
        v.extend(self.ff_dim());
        v
    }

    pub fn num_params(&self) -> usize {
        let ff = self.feedforward.as_ref().map_or(0, |f| f.w_a.len() + f.b_a.len() + f.w_b.len() + f.b_b.len());
        4 * self.heads.len() * self.model_dim() * self.head_dim() + ff
    }

    /// Attention output summed over heads for tokens `x: [L, d]`.
    pub fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.expect_matrix("attention input")?;
        if d != self.model_dim() {
            return Err(shape_err(format!("attention expects width {}, got {d}", self.model_dim())));
        }
        let temp = if self.scaled_attention { (self.head_dim() as f64).sqrt().recip() } else { 1.0 };
        let mut total: Option<Tensor> = None;
        for head in &self.heads {
            let q = x.matmul(&head.query)?;
            let k = x.matmul(&head.key)?;
            let v = x.matmul(&head.value)?;
            let logits = q.matmul(&k.transpose()?)?.scale(temp);
            let attn = logits.softmax_rows()?;
            let out = attn.matmul(&v)?.matmul(&head.output.transpose()?)?;
            total = Some(match total {
                None => out,
                Some(t) => t.add(&out)?,
            });
        }
        Ok(total.expect("at least one head"))
    }

    /// Attention followed by the feedforward, if any.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let m = self.attention(x)?;
        let Some(ff) = &self.feedforward else {
            return Ok(m);
        };
        let (l, _) = m.expect_matrix("attention output")?;
        let mut hidden = m.matmul(&ff.w_a.transpose()?)?;
        let df = ff.b_a.len();
        for row in hidden.data_mut().chunks_mut(df).take(l) {
            for (v, b) in row.iter_mut().zip(ff.b_a.data()) {
                *v = (*v + b).max(0.0);
            }
        }
        let mut out = hidden.matmul(&ff.w_b.transpose()?)?;
        let d = ff.b_b.len();
        for row in out.data_mut().chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(ff.b_b.data()) {
                *v += b;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.max_abs_diff(b).unwrap() < tol
    }

    #[test]
    fn zero_queries_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = MhaBlockParams::random(4, 2, 2, None, 1.0, &mut rng).unwrap();
        for h in p.heads_mut() {
            h.query = Tensor::zeros(&[4, 2]);
        }
        let x = gaussian(&[3, 4], 1.0, &mut rng);
        let out = p.forward(&x).unwrap();
        let mut expected = [0.0; 4];
        for h in p.heads() {
            let vo = x.matmul(&h.value).unwrap().matmul(&h.output.transpose().unwrap()).unwrap();
            for r in 0..3 {
                for (c, e) in expected.iter_mut().enumerate() {
                    *e += vo.at2(r, c) / 3.0;
                }
            }
        }
        for r in 0..3 {
            for (c, e) in expected.iter().enumerate() {
                assert!((out.at2(r, c) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_skips_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = MhaBlockParams::random(4, 2, 3, None, 1.0, &mut rng).unwrap();
        let x = gaussian(&[1, 4], 1.0, &mut rng);
        let mut expected = Tensor::zeros(&[1, 4]);
        for h in p.heads() {
            let vo = x.matmul(&h.value).unwrap().matmul(&h.output.transpose().unwrap()).unwrap();
            expected = expected.add(&vo).unwrap();
        }
        assert!(close(&p.forward(&x).unwrap(), &expected, 1e-12));
    }

    #[test]
    fn head_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = MhaBlockParams::random(6, 3, 3, Some(5), 1.0, &mut rng).unwrap();
        let mut q = p.clone();
        q.heads_mut().rotate_left(1);
        let x = gaussian(&[4, 6], 1.0, &mut rng);
        assert!(close(&p.forward(&x).unwrap(), &q.forward(&x).unwrap(), 1e-12));
    }

    #[test]
    fn temperature_flag_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = MhaBlockParams::random(4, 4, 1, None, 2.0, &mut rng).unwrap();
        let mut s = p.clone();
        s.scaled_attention = true;
        let x = gaussian(&[3, 4], 1.0, &mut rng);
        assert!(!close(&p.forward(&x).unwrap(), &s.forward(&x).unwrap(), 1e-9));
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = MhaBlockParams::random(4, 2, 2, None, 1.0, &mut rng).unwrap();
        let mut heads = p.heads().to_vec();
        heads[1].key = Tensor::zeros(&[4, 3]);
        assert!(MhaBlockParams::new(heads, None).is_err());
        assert!(p.forward(&Tensor::zeros(&[2, 5])).is_err());
    }
}
