//! Symmetry groups of network parameter spaces: positive monomial matrices
//! for ReLU MLPs and CNNs, head permutations with GL factors for attention.

pub mod fault;
pub mod gl;
pub mod monomial;

pub use fault::{current_fault, with_fault, Fault};
pub use gl::{sample_gl, GlMhaElement, MIN_ABS_DET};
pub use monomial::{sample_monomial, LayerMonomial, MonomialElement};

use rand::Rng;

use crate::error::{Error, Result};
use crate::netmodels::mlp::gaussian;
use crate::netmodels::{Envelope, MhaBlockParams, NetParams};
use crate::numcore::linalg::singular_values;
use crate::numcore::Tensor;

/// A group element of either family.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupElement {
    Monomial(MonomialElement),
    GlMha(GlMhaElement),
}

impl From<MonomialElement> for GroupElement {
    fn from(g: MonomialElement) -> Self {
        GroupElement::Monomial(g)
    }
}

impl From<GlMhaElement> for GroupElement {
    fn from(g: GlMhaElement) -> Self {
        GroupElement::GlMha(g)
    }
}

impl GroupElement {
    /// Identity element for the group acting on `params`.
    pub fn identity_for(params: &NetParams) -> Self {
        match params {
            NetParams::Mlp(p) => MonomialElement::identity(&p.dims()).into(),
            NetParams::Conv1d(p) => MonomialElement::identity(&p.channels()).into(),
            NetParams::Mha(p) => GlMhaElement::identity(p.num_heads(), p.head_dim()).into(),
        }
    }

    pub fn act(&self, params: &NetParams) -> Result<NetParams> {
        match (self, params) {
            (GroupElement::Monomial(g), NetParams::Mlp(p)) => Ok(g.act_mlp(p)?.into()),
            (GroupElement::Monomial(g), NetParams::Conv1d(p)) => Ok(g.act_conv(p)?.into()),
            (GroupElement::GlMha(g), NetParams::Mha(p)) => Ok(g.act(p)?.into()),
            _ => Err(Error::Architecture(format!(
                "{} element cannot act on {} parameters",
                self.kind(),
                params.arch().name()
            ))),
        }
    }

    pub fn compose(&self, other: &Self) -> Result<Self> {
        match (self, other) {
            (GroupElement::Monomial(a), GroupElement::Monomial(b)) => Ok(a.compose(b)?.into()),
            (GroupElement::GlMha(a), GroupElement::GlMha(b)) => Ok(a.compose(b)?.into()),
            _ => Err(Error::Architecture("cannot compose elements of different groups".into())),
        }
    }

    pub fn inverse(&self) -> Result<Self> {
        match self {
            GroupElement::Monomial(g) => Ok(g.inverse().into()),
            GroupElement::GlMha(g) => Ok(g.inverse()?.into()),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            GroupElement::Monomial(_) => "monomial",
            GroupElement::GlMha(_) => "gl_mha",
        }
    }

    pub fn to_envelope(&self) -> Envelope {
        match self {
            GroupElement::Monomial(g) => g.to_envelope(),
            GroupElement::GlMha(g) => g.to_envelope(),
        }
    }

    pub fn from_envelope(env: &Envelope) -> Result<Self> {
        match env.kind.as_deref() {
            Some("monomial") => Ok(MonomialElement::from_envelope(env)?.into()),
            Some("gl_mha") => Ok(GlMhaElement::from_envelope(env)?.into()),
            other => Err(Error::Malformed(format!("unknown group element kind {other:?}"))),
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        self.to_envelope().to_json().into_bytes()
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        Self::from_envelope(&Envelope::from_json(bytes)?)
    }
}

/// Draws a standard-normal input of the right shape for `params`, scaled by
/// `scale`. Sequence models get four tokens; conv nets get four output
/// positions.
pub fn sample_input(params: &NetParams, scale: f64, rng: &mut impl Rng) -> Tensor {
    match params {
        NetParams::Mlp(p) => gaussian(&[p.dims()[0]], scale, rng),
        NetParams::Conv1d(p) => {
            let t = 4 + p.windows().iter().map(|w| w - 1).sum::<usize>();
            gaussian(&[p.channels()[0], t], scale, rng)
        }
        NetParams::Mha(p) => gaussian(&[4, p.model_dim()], scale, rng),
    }
}

/// Outcome of a sampled functional-equivalence comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivCheck {
    pub equivalent: bool,
    pub max_abs_diff: f64,
    /// `max_abs_diff` divided by the largest output magnitude of the first
    /// network.
    pub max_rel_diff: f64,
}

/// Compares two networks on `n_samples` random inputs; they count as
/// equivalent when the largest absolute output difference is below `tol`.
pub fn check_functional_equiv(
    a: &NetParams,
    b: &NetParams,
    n_samples: usize,
    input_scale: f64,
    tol: f64,
    rng: &mut impl Rng,
) -> Result<EquivCheck> {
    if a.signature() != b.signature() {
        return Err(Error::Architecture(format!("{:?} vs {:?}", a.signature(), b.signature())));
    }
    let mut max_abs: f64 = 0.0;
    let mut max_out: f64 = 0.0;
    for _ in 0..n_samples {
        let x = sample_input(a, input_scale, rng);
        let ya = a.forward(&x)?;
        let yb = b.forward(&x)?;
        max_abs = max_abs.max(ya.max_abs_diff(&yb)?);
        max_out = max_out.max(ya.max_abs());
    }
    Ok(EquivCheck {
        equivalent: max_abs < tol,
        max_abs_diff: max_abs,
        max_rel_diff: max_abs / max_out.max(f64::MIN_POSITIVE),
    })
}

/// Checks the conditions under which head permutations and GL factors form
/// the full symmetry group of an attention block: every projection has full
/// numerical rank and the products `W^Q_i (W^K_i)^T` are pairwise distinct.
pub fn check_genericity(params: &MhaBlockParams, rank_tol: f64) -> bool {
    let full_rank = |m: &Tensor| match singular_values(m) {
        Ok(sv) => {
            let top = sv[0];
            top > 0.0 && sv.len() == params.head_dim() && sv.iter().all(|&s| s > rank_tol * top)
        }
        Err(_) => false,
    };
    for h in params.heads() {
        if !(0..4).all(|role| full_rank(h.get(role))) {
            return false;
        }
    }
    let products: Vec<Tensor> =
        match params.heads().iter().map(|h| h.query.matmul(&h.key.transpose()?)).collect::<Result<_>>() {
            Ok(p) => p,
            Err(_) => return false,
        };
    for i in 0..products.len() {
        for j in i + 1..products.len() {
            match products[i].max_abs_diff(&products[j]) {
                Ok(d) if d > rank_tol => {}
                _ => return false,
            }
        }
    }
    true
}
