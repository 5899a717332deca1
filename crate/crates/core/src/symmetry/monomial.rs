use rand::seq::SliceRandom;
use rand::Rng;

use super::fault::{self, Fault};
use crate::error::{shape_err, Error, Result};
use crate::netmodels::{Conv1dParams, ConvLayer, DenseLayer, Envelope, MlpParams};
use crate::numcore::Tensor;

/// Positive monomial matrix `D P` acting on one hidden layer:
/// `(g x)[r] = diag[r] * x[perm[r]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMonomial {
    perm: Vec<usize>,
    diag: Vec<f64>,
}

pub(crate) fn validate_perm(perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation")));
        }
    }
    Ok(())
}

pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl LayerMonomial {
    pub fn new(perm: Vec<usize>, diag: Vec<f64>) -> Result<Self> {
        if perm.len() != diag.len() || perm.is_empty() {
            return Err(shape_err(format!("permutation of {} vs diagonal of {}", perm.len(), diag.len())));
        }
        validate_perm(&perm)?;
        if let Some(d) = diag.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(Error::InvalidArgument(format!("diagonal entry {d} is not strictly positive")));
        }
        Ok(Self { perm, diag })
    }

    pub fn identity(n: usize) -> Self {
        Self { perm: (0..n).collect(), diag: vec![1.0; n] }
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p) && self.diag.iter().all(|&d| d == 1.0)
    }

    /// `self ∘ other`: acting with the result equals acting with `other`
    /// first and `self` second.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(shape_err(format!("compose layers of size {} and {}", self.len(), other.len())));
        }
        let perm = self.perm.iter().map(|&p| other.perm[p]).collect();
        let diag = self.diag.iter().zip(&self.perm).map(|(d, &p)| d * other.diag[p]).collect();
        Ok(Self { perm, diag })
    }

    pub fn inverse(&self) -> Self {
        let perm = invert_perm(&self.perm);
        let diag = perm.iter().map(|&p| 1.0 / self.diag[p]).collect();
        Self { perm, diag }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.perm.iter().zip(&self.diag).map(|(&p, d)| d * x[p]).collect()
    }
}

/// Acts on a row-major `[rows, cols, inner]` block:
/// `out[r, c, k] = a[r] * w[pr(r), pc(c), k] / b[c]`.
pub(crate) fn act_block(
    w: &[f64],
    rows: usize,
    cols: usize,
    inner: usize,
    row_g: Option<&LayerMonomial>,
    col_g: Option<&LayerMonomial>,
) -> Vec<f64> {
    let drop_inverse = fault::active() == Some(Fault::MonomialDropInverse);
    let mut out = vec![0.0; w.len()];
    for r in 0..rows {
        let (pr, dr) = row_g.map_or((r, 1.0), |g| (g.perm[r], g.diag[r]));
        for c in 0..cols {
            let (pc, dc) = col_g.map_or((c, 1.0), |g| (g.perm[c], g.diag[c]));
            let src = (pr * cols + pc) * inner;
            let dst = (r * cols + c) * inner;
            for k in 0..inner {
                out[dst + k] = if drop_inverse { dr * w[src + k] * dc } else { dr * w[src + k] / dc };
            }
        }
    }
    out
}

/// An element of the product of positive monomial groups over the hidden
/// layers `1..L-1`; the input and output layers are fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialElement {
    layers: Vec<LayerMonomial>,
}

impl MonomialElement {
    pub fn new(layers: Vec<LayerMonomial>) -> Self {
        Self { layers }
    }

    /// Identity for a network with dims `[n_0, ..., n_L]`.
    pub fn identity(dims: &[usize]) -> Self {
        Self { layers: hidden(dims).iter().map(|&n| LayerMonomial::identity(n)).collect() }
    }

    pub fn layers(&self) -> &[LayerMonomial] {
        &self.layers
    }

    /// Hidden layer sizes `[n_1, ..., n_{L-1}]`.
    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers.iter().map(LayerMonomial::len).collect()
    }

    /// Element acting on layer `i` of the network (`0..=L`), `None` at the
    /// fixed boundary layers.
    pub fn at(&self, i: usize) -> Option<&LayerMonomial> {
        if i == 0 {
            None
        } else {
            self.layers.get(i - 1)
        }
    }

    pub fn compose(&self, other: &Self) -> Result<Self> {
        if self.layers.len() != other.layers.len() {
            return Err(shape_err("monomial elements of different depth"));
        }
        let layers = self.layers.iter().zip(&other.layers).map(|(a, b)| a.compose(b)).collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn inverse(&self) -> Self {
        Self { layers: self.layers.iter().map(LayerMonomial::inverse).collect() }
    }

    pub fn is_identity(&self) -> bool {
        self.layers.iter().all(LayerMonomial::is_identity)
    }

    fn check_dims(&self, dims: &[usize]) -> Result<()> {
        if self.hidden_dims() != hidden(dims) {
            return Err(shape_err(format!(
                "group element for hidden sizes {:?} applied to network dims {dims:?}",
                self.hidden_dims()
            )));
        }
        Ok(())
    }

    pub fn act_mlp(&self, params: &MlpParams) -> Result<MlpParams> {
        self.check_dims(&params.dims())?;
        let layers = params
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let (rows, cols) = (l.weight.shape()[0], l.weight.shape()[1]);
                let (row_g, col_g) = (self.at(i + 1), self.at(i));
                let w = act_block(l.weight.data(), rows, cols, 1, row_g, col_g);
                let b = act_block(l.bias.data(), rows, 1, 1, row_g, None);
                DenseLayer { weight: Tensor::from_parts(vec![rows, cols], w), bias: Tensor::from_parts(vec![rows], b) }
            })
            .collect();
        MlpParams::new(layers)
    }

    /// Acts on channel axes only; the window axis is untouched.
    pub fn act_conv(&self, params: &Conv1dParams) -> Result<Conv1dParams> {
        self.check_dims(&params.channels())?;
        let layers = params
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let s = l.filter.shape().to_vec();
                let (row_g, col_g) = (self.at(i + 1), self.at(i));
                let f = act_block(l.filter.data(), s[0], s[1], s[2], row_g, col_g);
                let b = act_block(l.bias.data(), s[0], 1, 1, row_g, None);
                ConvLayer { filter: Tensor::from_parts(s.clone(), f), bias: Tensor::from_parts(vec![s[0]], b) }
            })
            .collect();
        Conv1dParams::new(layers)
    }

    pub fn to_envelope(&self) -> Envelope {
        let mut env = Envelope::new(None, Some("monomial"), self.hidden_dims());
        for (i, l) in self.layers.iter().enumerate() {
            env.put(format!("layer{}.diag", i + 1), &Tensor::from_parts(vec![l.len()], l.diag.clone()));
            env.perms.insert(format!("layer{}.perm", i + 1), l.perm.clone());
        }
        env
    }

    pub fn from_envelope(env: &Envelope) -> Result<Self> {
        env.check_version()?;
        env.expect_kind("monomial")?;
        let bad = |e: Error| Error::Malformed(e.to_string());
        let layers = env
            .dims
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let diag = env.tensor(&format!("layer{}.diag", i + 1))?;
                let perm = env.perm(&format!("layer{}.perm", i + 1))?;
                if diag.len() != n || diag.rank() != 1 {
                    return Err(Error::Malformed(format!("layer {} diagonal has shape {:?}", i + 1, diag.shape())));
                }
                LayerMonomial::new(perm.to_vec(), diag.into_data()).map_err(bad)
            })
            .collect::<Result<Vec<_>>>()?;
        if env.tensors.len() != layers.len() || env.perms.len() != layers.len() {
            return Err(Error::Malformed("unexpected entries in monomial element".into()));
        }
        Ok(Self { layers })
    }
}

fn hidden(dims: &[usize]) -> &[usize] {
    if dims.len() < 2 {
        &[]
    } else {
        &dims[1..dims.len() - 1]
    }
}

/// Samples a monomial element for network dims `[n_0, ..., n_L]` with
/// diagonal entries i.i.d. uniform on `[low, high]` and, when `permute` is
/// set, uniformly random permutations.
pub fn sample_monomial(
    dims: &[usize],
    low: f64,
    high: f64,
    permute: bool,
    rng: &mut impl Rng,
) -> Result<MonomialElement> {
    if !(low >= 1.0 && high >= low && high.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale range [{low}, {high}]")));
    }
    let layers = hidden(dims)
        .iter()
        .map(|&n| {
            let mut perm: Vec<usize> = (0..n).collect();
            if permute {
                perm.shuffle(rng);
            }
            let diag = (0..n).map(|_| if low == high { low } else { rng.random_range(low..=high) }).collect();
            LayerMonomial { perm, diag }
        })
        .collect();
    Ok(MonomialElement { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_example_rescales_hidden_units() {
        let net = MlpParams::new(vec![
            DenseLayer { weight: Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap(), bias: Tensor::zeros(&[2]) },
            DenseLayer { weight: Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap(), bias: Tensor::zeros(&[1]) },
        ])
        .unwrap();
        let g = MonomialElement::new(vec![LayerMonomial::new(vec![0, 1], vec![2.0, 0.5]).unwrap()]);
        let out = g.act_mlp(&net).unwrap();
        assert_eq!(out.layers()[0].weight.data(), &[2.0, 1.0]);
        assert_eq!(out.layers()[1].weight.data(), &[0.5, 2.0]);
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), &[3.0]);
        assert_eq!(out.forward(&x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn identity_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = MlpParams::random(&[3, 5, 4, 2], 1.0, &mut rng).unwrap();
        assert_eq!(MonomialElement::identity(&net.dims()).act_mlp(&net).unwrap(), net);
    }

    #[test]
    fn degenerate_range_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = sample_monomial(&[2, 6, 6, 1], 1.0, 1.0, false, &mut rng).unwrap();
        assert!(g.is_identity());
        assert!(sample_monomial(&[2, 3, 1], 0.5, 2.0, false, &mut rng).is_err());
        assert!(sample_monomial(&[2, 3, 1], 3.0, 2.0, false, &mut rng).is_err());
    }

    #[test]
    fn layer_compose_and_inverse() {
        let a = LayerMonomial::new(vec![2, 0, 1], vec![2.0, 3.0, 5.0]).unwrap();
        let b = LayerMonomial::new(vec![1, 2, 0], vec![7.0, 11.0, 13.0]).unwrap();
        let x = [1.0, -2.0, 4.0];
        let ab = a.compose(&b).unwrap();
        assert_eq!(ab.apply(&x), a.apply(&b.apply(&x)));
        assert!(a.compose(&a.inverse()).unwrap().apply(&x).iter().zip(&x).all(|(u, v)| (u - v).abs() < 1e-15));
    }

    #[test]
    fn invalid_layers_rejected() {
        assert!(LayerMonomial::new(vec![0, 0], vec![1.0, 1.0]).is_err());
        assert!(LayerMonomial::new(vec![0, 1], vec![1.0, 0.0]).is_err());
        assert!(LayerMonomial::new(vec![0, 1], vec![1.0, -2.0]).is_err());
        assert!(LayerMonomial::new(vec![0], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MlpParams::random(&[2, 4, 1], 1.0, &mut rng).unwrap();
        let g = MonomialElement::identity(&[2, 5, 1]);
        assert!(g.act_mlp(&net).is_err());
    }
}
