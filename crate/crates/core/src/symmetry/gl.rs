use rand::seq::SliceRandom;
use rand::Rng;

use super::fault::{self, Fault};
use super::monomial::{invert_perm, validate_perm};
use crate::error::{shape_err, Error, Result};
use crate::netmodels::{Envelope, HeadProj, MhaBlockParams};
use crate::numcore::linalg::{det, inverse};
use crate::numcore::Tensor;

/// Smallest `|det|` accepted for a GL factor.
pub const MIN_ABS_DET: f64 = 1e-10;

const MAX_SAMPLE_ATTEMPTS: usize = 100;

/// Head permutation plus one pair of invertible `d_h x d_h` matrices per head.
/// Head `i` of `g θ` is
/// `(W^Q_{σ(i)} U_i^T, W^K_{σ(i)} U_i^{-1}, W^V_{σ(i)} V_i^T, W^O_{σ(i)} V_i^{-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlMhaElement {
    sigma: Vec<usize>,
    u: Vec<Tensor>,
    v: Vec<Tensor>,
}

fn check_invertible(m: &Tensor, what: &str) -> Result<()> {
    let (r, c) = m.expect_matrix(what)?;
    if r != c {
        return Err(shape_err(format!("{what} is {r}x{c}")));
    }
    let dt = det(m)?;
    if dt.is_nan() || dt.abs() <= MIN_ABS_DET {
        return Err(Error::InvalidArgument(format!("{what} has determinant {dt:e}")));
    }
    Ok(())
}

impl GlMhaElement {
    pub fn new(sigma: Vec<usize>, u: Vec<Tensor>, v: Vec<Tensor>) -> Result<Self> {
        if sigma.is_empty() || u.len() != sigma.len() || v.len() != sigma.len() {
            return Err(shape_err(format!(
                "{} head indices, {} U factors, {} V factors",
                sigma.len(),
                u.len(),
                v.len()
            )));
        }
        validate_perm(&sigma)?;
        let dh = u[0].shape().first().copied().unwrap_or(0);
        for (i, m) in u.iter().chain(&v).enumerate() {
            check_invertible(m, &format!("factor {}", i + 1))?;
            if m.shape()[0] != dh {
                return Err(shape_err("GL factors of different sizes"));
            }
        }
        Ok(Self { sigma, u, v })
    }

    pub fn identity(h: usize, d_h: usize) -> Self {
        Self { sigma: (0..h).collect(), u: vec![Tensor::eye(d_h); h], v: vec![Tensor::eye(d_h); h] }
    }

    pub fn sigma(&self) -> &[usize] {
        &self.sigma
    }

    pub fn u(&self) -> &[Tensor] {
        &self.u
    }

    pub fn v(&self) -> &[Tensor] {
        &self.v
    }

    pub fn num_heads(&self) -> usize {
        self.sigma.len()
    }

    pub fn head_dim(&self) -> usize {
        self.u[0].shape()[0]
    }

    /// `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Self) -> Result<Self> {
        if self.num_heads() != other.num_heads() || self.head_dim() != other.head_dim() {
            return Err(shape_err("GL elements of different shape"));
        }
        let sigma = self.sigma.iter().map(|&s| other.sigma[s]).collect();
        let u = (0..self.num_heads()).map(|i| self.u[i].matmul(&other.u[self.sigma[i]])).collect::<Result<_>>()?;
        let v = (0..self.num_heads()).map(|i| self.v[i].matmul(&other.v[self.sigma[i]])).collect::<Result<_>>()?;
        Ok(Self { sigma, u, v })
    }

    pub fn inverse(&self) -> Result<Self> {
        let sigma = invert_perm(&self.sigma);
        let u = sigma.iter().map(|&s| inverse(&self.u[s])).collect::<Result<_>>()?;
        let v = sigma.iter().map(|&s| inverse(&self.v[s])).collect::<Result<_>>()?;
        Ok(Self { sigma, u, v })
    }

    /// Acts on the attention heads; any feedforward is carried over as is.
    pub fn act(&self, params: &MhaBlockParams) -> Result<MhaBlockParams> {
        if params.num_heads() != self.num_heads() || params.head_dim() != self.head_dim() {
            return Err(shape_err(format!(
                "GL element for h={}, d_h={} applied to block with h={}, d_h={}",
                self.num_heads(),
                self.head_dim(),
                params.num_heads(),
                params.head_dim()
            )));
        }
        let drop_inverse = fault::active() == Some(Fault::GlDropInverse);
        let heads = params.heads();
        let new_heads = (0..self.num_heads())
            .map(|i| {
                let src = &heads[self.sigma[i]];
                let (u, v) = (&self.u[i], &self.v[i]);
                let key_factor = if drop_inverse { u.transpose()? } else { inverse(u)? };
                Ok(HeadProj {
                    query: src.query.matmul(&u.transpose()?)?,
                    key: src.key.matmul(&key_factor)?,
                    value: src.value.matmul(&v.transpose()?)?,
                    output: src.output.matmul(&inverse(v)?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = MhaBlockParams::new(new_heads, params.feedforward().cloned())?;
        out.scaled_attention = params.scaled_attention;
        Ok(out)
    }

    pub fn to_envelope(&self) -> Envelope {
        let mut env = Envelope::new(None, Some("gl_mha"), vec![self.num_heads(), self.head_dim()]);
        for i in 0..self.num_heads() {
            env.put(format!("head{}.u", i + 1), &self.u[i]);
            env.put(format!("head{}.v", i + 1), &self.v[i]);
        }
        env.perms.insert("sigma".into(), self.sigma.clone());
        env
    }

    pub fn from_envelope(env: &Envelope) -> Result<Self> {
        env.check_version()?;
        env.expect_kind("gl_mha")?;
        let [h, dh] = env.dims[..] else {
            return Err(Error::Malformed(format!("GL element dims {:?}", env.dims)));
        };
        let sigma = env.perm("sigma")?.to_vec();
        if sigma.len() != h || env.tensors.len() != 2 * h || env.perms.len() != 1 {
            return Err(Error::Malformed("GL element entries do not match its dims".into()));
        }
        let mut u = Vec::with_capacity(h);
        let mut v = Vec::with_capacity(h);
        for i in 1..=h {
            for (store, name) in [(&mut u, "u"), (&mut v, "v")] {
                let t = env.tensor(&format!("head{i}.{name}"))?;
                if t.shape() != [dh, dh] {
                    return Err(Error::Malformed(format!("head {i} {name} has shape {:?}", t.shape())));
                }
                store.push(t);
            }
        }
        Self::new(sigma, u, v).map_err(|e| Error::Malformed(e.to_string()))
    }
}

fn sample_invertible(d_h: usize, spread: f64, rng: &mut impl Rng) -> Result<Tensor> {
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let data: Vec<f64> = (0..d_h * d_h).map(|_| rng.random_range(-spread..=spread)).collect();
        let m = Tensor::from_parts(vec![d_h, d_h], data);
        if det(&m)?.abs() > MIN_ABS_DET {
            return Ok(m);
        }
    }
    Err(Error::SamplerExhausted(MAX_SAMPLE_ATTEMPTS))
}

/// Samples a uniformly random head permutation and GL factors with entries
/// uniform on `[-spread, spread]`, resampling singular draws.
pub fn sample_gl(h: usize, d_h: usize, spread: f64, rng: &mut impl Rng) -> Result<GlMhaElement> {
    if !(spread > 0.0 && spread.is_finite()) || h == 0 || d_h == 0 {
        return Err(Error::InvalidArgument(format!("sample_gl(h={h}, d_h={d_h}, spread={spread})")));
    }
    let mut sigma: Vec<usize> = (0..h).collect();
    sigma.shuffle(rng);
    let mut u = Vec::with_capacity(h);
    let mut v = Vec::with_capacity(h);
    for _ in 0..h {
        u.push(sample_invertible(d_h, spread, rng)?);
        v.push(sample_invertible(d_h, spread, rng)?);
    }
    Ok(GlMhaElement { sigma, u, v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodels::mlp::gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_leaves_block_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MhaBlockParams::random(8, 4, 2, Some(5), 1.0, &mut rng).unwrap();
        assert_eq!(GlMhaElement::identity(2, 4).act(&p).unwrap(), p);
    }

    #[test]
    fn scalar_factor_cancels_in_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MhaBlockParams::random(3, 1, 1, None, 1.0, &mut rng).unwrap();
        let g =
            GlMhaElement::new(vec![0], vec![Tensor::matrix(1, 1, vec![3.5]).unwrap()], vec![Tensor::eye(1)]).unwrap();
        let q = g.act(&p).unwrap();
        let x = gaussian(&[4, 3], 1.0, &mut rng);
        let (a, b) = (p.forward(&x).unwrap(), q.forward(&x).unwrap());
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn sampled_factors_are_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spread in [1.0, 10.0, 100.0] {
            let g = sample_gl(3, 2, spread, &mut rng).unwrap();
            for m in g.u().iter().chain(g.v()) {
                assert!(det(m).unwrap().abs() > MIN_ABS_DET);
                assert!(m.data().iter().all(|x| x.abs() <= spread));
            }
        }
        assert!(sample_gl(2, 2, 0.0, &mut rng).is_err());
    }

    #[test]
    fn singular_factor_rejected() {
        let singular = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(GlMhaElement::new(vec![0], vec![singular], vec![Tensor::eye(2)]).is_err());
    }

    #[test]
    fn envelope_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = sample_gl(2, 3, 10.0, &mut rng).unwrap();
        let env = Envelope::from_json(g.to_envelope().to_json().as_bytes()).unwrap();
        assert_eq!(GlMhaElement::from_envelope(&env).unwrap(), g);
    }
}
