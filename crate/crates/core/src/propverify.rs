//! Numerical property checks for quasi-equivariant layers: witnesses,
//! cocycle and gauge identities, stabilizer constraints, plus the action
//! and pooling invariants the rest of the crate relies on.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::equivlayers::{invariant_pool, lift, EquivStack, WeightFeature};
use crate::error::{Error, Result};
use crate::netmodels::{Conv1dParams, DenseLayer, MhaBlockParams, MlpParams, NetParams};
use crate::numcore::linalg::singular_values;
use crate::numcore::Tensor;
use crate::quasilayers::{quasi_apply_mha, quasi_apply_mlp, GlNet, ScaleNet, SCALE_EPS_MAX};
use crate::statfeat::{stat_features, stat_len};
use crate::symmetry::{
    check_functional_equiv, current_fault, sample_gl, sample_monomial, with_fault, GlMhaElement, GroupElement,
    LayerMonomial, MonomialElement,
};

/// Absolute floor under every relative residual.
pub const RESIDUAL_FLOOR: f64 = 1e-12;

/// Outcome of one property over a batch of samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyReport {
    pub name: String,
    pub samples: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl PropertyReport {
    pub fn new(name: impl Into<String>, samples: usize, max_residual: f64, tolerance: f64) -> Self {
        let pass = max_residual < tolerance;
        Self { name: name.into(), samples, max_residual, tolerance, pass }
    }
}

impl fmt::Display for PropertyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} residual {:.3e}  tol {:.1e}  ({} samples)",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.max_residual,
            self.tolerance,
            self.samples
        )
    }
}

pub fn write_reports_csv<W: std::io::Write>(reports: &[PropertyReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn format_reports(reports: &[PropertyReport]) -> String {
    reports.iter().map(|r| format!("{r}\n")).collect()
}

/// `max|a - b| / max(max|a|, max|b|, floor)`.
pub fn relative_residual(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(RESIDUAL_FLOOR, f64::max);
    diff / scale
}

/// Distance between two group elements; differing permutations are
/// infinitely far apart.
pub fn element_residual(a: &GroupElement, b: &GroupElement) -> f64 {
    let (ea, eb) = (a.to_envelope(), b.to_envelope());
    if ea.kind != eb.kind || ea.dims != eb.dims || ea.perms != eb.perms {
        return f64::INFINITY;
    }
    let flat = |e: &crate::netmodels::Envelope| -> Vec<f64> {
        e.tensors.values().flat_map(|t| t.data.0.iter().copied()).collect()
    };
    relative_residual(&flat(&ea), &flat(&eb))
}

/// Identity of the group `g` belongs to.
pub fn identity_like(g: &GroupElement) -> GroupElement {
    match g {
        GroupElement::Monomial(m) => {
            MonomialElement::new(m.hidden_dims().into_iter().map(LayerMonomial::identity).collect()).into()
        }
        GroupElement::GlMha(e) => GlMhaElement::identity(e.num_heads(), e.head_dim()).into(),
    }
}

/// Something the symmetry group acts on.
pub trait Acted: Sized {
    fn act_by(&self, g: &GroupElement) -> Result<Self>;
    fn values(&self) -> Vec<f64>;
}

impl Acted for NetParams {
    fn act_by(&self, g: &GroupElement) -> Result<Self> {
        g.act(self)
    }

    fn values(&self) -> Vec<f64> {
        self.to_envelope().tensors.values().flat_map(|t| t.data.0.iter().copied()).collect()
    }
}

impl Acted for WeightFeature {
    fn act_by(&self, g: &GroupElement) -> Result<Self> {
        match g {
            GroupElement::Monomial(m) => self.act(m),
            GroupElement::GlMha(_) => Err(Error::Architecture("GL elements do not act on weight features".into())),
        }
    }

    fn values(&self) -> Vec<f64> {
        self.data.data().to_vec()
    }
}

/// A map with a constructive quasi-equivariance witness:
/// `apply(g x) = witness(g, x) apply(x)`.
pub trait QuasiLayer {
    type In: Acted;
    type Out: Acted;
    fn apply(&self, x: &Self::In) -> Result<Self::Out>;
    fn witness(&self, g: &GroupElement, x: &Self::In) -> Result<GroupElement>;
}

/// A quasi layer of the form `F(x) = α̂(x) β(x)` with `β` strictly
/// equivariant.
pub trait Lifted: QuasiLayer {
    fn alpha_hat(&self, x: &Self::In) -> Result<GroupElement>;

    /// `α̂(g x) g α̂(x)^{-1}`.
    fn lifted(&self, g: &GroupElement, x: &Self::In) -> Result<GroupElement> {
        let gx = x.act_by(g)?;
        self.alpha_hat(&gx)?.compose(&g.compose(&self.alpha_hat(x)?.inverse()?)?)
    }
}

/// Scale-net quasi layer on MLP or CNN parameters.
#[derive(Debug, Clone)]
pub struct MonomialQuasi {
    pub net: ScaleNet,
    pub beta: EquivStack,
}

impl MonomialQuasi {
    pub fn random(template: &NetParams, widths: &[usize], eps: f64, rng: &mut impl Rng) -> Self {
        let dims = template.dims();
        let mut net = ScaleNet::new(stat_len(template), &dims[1..dims.len() - 1], rng);
        net.freeze_eps(eps);
        Self { net, beta: EquivStack::new(widths, rng) }
    }
}

impl QuasiLayer for MonomialQuasi {
    type In = NetParams;
    type Out = WeightFeature;

    fn apply(&self, x: &NetParams) -> Result<WeightFeature> {
        quasi_apply_mlp(&self.net, x, &self.beta)
    }

    fn witness(&self, g: &GroupElement, x: &NetParams) -> Result<GroupElement> {
        self.lifted(g, x)
    }
}

impl Lifted for MonomialQuasi {
    fn alpha_hat(&self, x: &NetParams) -> Result<GroupElement> {
        Ok(self.net.alpha(x)?.into())
    }
}

/// Scale-net quasi layer on channelized features; α̂ reads the statistics of
/// channel 0 of the first batch entry.
#[derive(Debug, Clone)]
pub struct FeatureQuasi {
    pub net: ScaleNet,
    pub beta: EquivStack,
}

impl QuasiLayer for FeatureQuasi {
    type In = WeightFeature;
    type Out = WeightFeature;

    fn apply(&self, x: &WeightFeature) -> Result<WeightFeature> {
        let a = self.alpha_hat(x)?;
        self.beta.apply(x)?.act_by(&a)
    }

    fn witness(&self, g: &GroupElement, x: &WeightFeature) -> Result<GroupElement> {
        self.lifted(g, x)
    }
}

impl Lifted for FeatureQuasi {
    fn alpha_hat(&self, x: &WeightFeature) -> Result<GroupElement> {
        Ok(self.net.alpha(&x.to_params(0, 0)?)?.into())
    }
}

/// GL quasi layer `θ -> α̂(θ) θ` on attention blocks.
#[derive(Debug, Clone)]
pub struct GlQuasi {
    pub net: GlNet,
}

impl GlQuasi {
    pub fn random(template: &MhaBlockParams, eps: f64, rng: &mut impl Rng) -> Self {
        let stats = stat_len(&template.clone().into());
        let mut net = GlNet::new(stats, template.num_heads(), template.head_dim(), rng);
        net.freeze_eps(eps.min(GlNet::eps_bound(template.head_dim())));
        Self { net }
    }
}

fn mha_of(x: &NetParams) -> Result<&MhaBlockParams> {
    x.as_mha()
        .ok_or_else(|| Error::Architecture(format!("GL layer needs attention parameters, got {}", x.arch().name())))
}

impl QuasiLayer for GlQuasi {
    type In = NetParams;
    type Out = NetParams;

    fn apply(&self, x: &NetParams) -> Result<NetParams> {
        Ok(quasi_apply_mha(&self.net, mha_of(x)?)?.into())
    }

    fn witness(&self, g: &GroupElement, x: &NetParams) -> Result<GroupElement> {
        self.lifted(g, x)
    }
}

impl Lifted for GlQuasi {
    fn alpha_hat(&self, x: &NetParams) -> Result<GroupElement> {
        Ok(self.net.alpha(mha_of(x)?)?.into())
    }
}

/// `second ∘ first`, witnessed by chaining the two witnesses.
#[derive(Debug, Clone)]
pub struct Composed<A, B> {
    pub first: A,
    pub second: B,
}

impl<A, B> QuasiLayer for Composed<A, B>
where
    A: QuasiLayer,
    B: QuasiLayer<In = A::Out>,
{
    type In = A::In;
    type Out = B::Out;

    fn apply(&self, x: &A::In) -> Result<B::Out> {
        self.second.apply(&self.first.apply(x)?)
    }

    fn witness(&self, g: &GroupElement, x: &A::In) -> Result<GroupElement> {
        let inner = self.first.witness(g, x)?;
        self.second.witness(&inner, &self.first.apply(x)?)
    }
}

/// The witness `g'` and the residual of `F(g x) = g' F(x)`.
pub fn witness_quasi_equivariance<L: QuasiLayer>(
    layer: &L,
    x: &L::In,
    g: &GroupElement,
) -> Result<(GroupElement, f64)> {
    let witness = layer.witness(g, x)?;
    let lhs = layer.apply(&x.act_by(g)?)?;
    let rhs = layer.apply(x)?.act_by(&witness)?;
    let r = relative_residual(&lhs.values(), &rhs.values());
    if !r.is_finite() {
        return Err(Error::NonFinite("quasi-equivariance residual".into()));
    }
    Ok((witness, r))
}

pub fn check_witness<L: QuasiLayer>(
    name: &str,
    layer: &L,
    pairs: &[(GroupElement, L::In)],
    tol: f64,
) -> Result<PropertyReport> {
    let mut worst: f64 = 0.0;
    for (g, x) in pairs {
        worst = worst.max(witness_quasi_equivariance(layer, x, g)?.1);
    }
    Ok(PropertyReport::new(name, pairs.len(), worst, tol))
}

/// Residual of strict equivariance `f(g x) = g f(x)`.
pub fn strict_residual<X: Acted, Y: Acted>(f: &dyn Fn(&X) -> Result<Y>, g: &GroupElement, x: &X) -> Result<f64> {
    let lhs = f(&x.act_by(g)?)?;
    let rhs = f(x)?.act_by(g)?;
    Ok(relative_residual(&lhs.values(), &rhs.values()))
}

pub fn check_strict<X: Acted, Y: Acted>(
    name: &str,
    f: &dyn Fn(&X) -> Result<Y>,
    pairs: &[(GroupElement, X)],
    tol: f64,
) -> Result<PropertyReport> {
    let mut worst: f64 = 0.0;
    for (g, x) in pairs {
        worst = worst.max(strict_residual(f, g, x)?);
    }
    Ok(PropertyReport::new(name, pairs.len(), worst, tol))
}

/// A map `(g, x) -> G`, candidate 1-cocycle.
pub type CocycleFn<'a, X> = dyn Fn(&GroupElement, &X) -> Result<GroupElement> + 'a;

/// Checks `α(e, x) = e` and `α(g1 g2, x) = α(g1, g2 x) α(g2, x)` on every
/// triple.
pub fn check_cocycle<X: Acted>(
    name: &str,
    alpha: &CocycleFn<'_, X>,
    triples: &[(GroupElement, GroupElement, X)],
    tol: f64,
) -> Result<PropertyReport> {
    let mut worst: f64 = 0.0;
    for (g1, g2, x) in triples {
        let e = identity_like(g1);
        worst = worst.max(element_residual(&alpha(&e, x)?, &e));
        let lhs = alpha(&g1.compose(g2)?, x)?;
        let rhs = alpha(g1, &x.act_by(g2)?)?.compose(&alpha(g2, x)?)?;
        worst = worst.max(element_residual(&lhs, &rhs));
    }
    Ok(PropertyReport::new(name, triples.len(), worst, tol))
}

/// `α^β(g, x) = β̂(g x) α(g, x) β̂(x)^{-1}`.
pub fn gauge_transform<'a, X: Acted>(
    alpha: &'a CocycleFn<'a, X>,
    beta_hat: &'a dyn Fn(&X) -> Result<GroupElement>,
) -> impl Fn(&GroupElement, &X) -> Result<GroupElement> + 'a {
    move |g, x| beta_hat(&x.act_by(g)?)?.compose(&alpha(g, x)?)?.compose(&beta_hat(x)?.inverse()?)
}

/// The gauge-transformed cocycle must again satisfy both cocycle identities.
pub fn check_gauge<X: Acted>(
    name: &str,
    alpha: &CocycleFn<'_, X>,
    beta_hat: &dyn Fn(&X) -> Result<GroupElement>,
    triples: &[(GroupElement, GroupElement, X)],
    tol: f64,
) -> Result<PropertyReport> {
    let transformed = gauge_transform(alpha, beta_hat);
    check_cocycle(name, &transformed, triples, tol)
}

/// With the coboundary gauge `β̂ = α̂`, `F'(x) = α̂(x)^{-1} F(x)` is strictly
/// equivariant.
pub fn check_coboundary<L: Lifted>(
    name: &str,
    layer: &L,
    pairs: &[(GroupElement, L::In)],
    tol: f64,
) -> Result<PropertyReport> {
    let gauged = |x: &L::In| layer.apply(x)?.act_by(&layer.alpha_hat(x)?.inverse()?);
    check_strict(name, &gauged, pairs, tol)
}

/// Whether `h x` reproduces `x` bit for bit.
pub fn is_stabilizer<X: Acted>(h: &GroupElement, x: &X) -> Result<bool> {
    let moved = x.act_by(h)?.values();
    let orig = x.values();
    Ok(moved.len() == orig.len() && moved.iter().zip(&orig).all(|(a, b)| a.to_bits() == b.to_bits()))
}

/// For every stabilizer `h` of `x`: `F(h x) = F(x)` and the witness fixes
/// `F(x)`. Elements that do not fix `x` are rejected.
pub fn check_stabilizer_consistency<L: QuasiLayer>(
    name: &str,
    layer: &L,
    x: &L::In,
    stabilizers: &[GroupElement],
    tol: f64,
) -> Result<PropertyReport> {
    let fx = layer.apply(x)?;
    let base = fx.values();
    let mut worst: f64 = 0.0;
    for (k, h) in stabilizers.iter().enumerate() {
        if !is_stabilizer(h, x)? {
            return Err(Error::InvalidArgument(format!("element {k} does not fix the parameters")));
        }
        worst = worst.max(relative_residual(&layer.apply(&x.act_by(h)?)?.values(), &base));
        worst = worst.max(relative_residual(&fx.act_by(&layer.witness(h, x)?)?.values(), &base));
    }
    Ok(PropertyReport::new(name, stabilizers.len(), worst, tol))
}

/// Copy of `p` in which hidden neuron `j` of layer `layer` (1-based) is a
/// bit-identical duplicate of neuron `i`.
pub fn duplicate_neuron(p: &MlpParams, layer: usize, i: usize, j: usize) -> Result<MlpParams> {
    let dims = p.dims();
    if layer == 0 || layer + 1 >= dims.len() || i >= dims[layer] || j >= dims[layer] || i == j {
        return Err(Error::InvalidArgument(format!("cannot duplicate neuron {i} into {j} of layer {layer}")));
    }
    let mut layers: Vec<DenseLayer> = p.layers().to_vec();
    let cols = dims[layer - 1];
    let incoming = &mut layers[layer - 1];
    let w = incoming.weight.data_mut();
    for c in 0..cols {
        w[j * cols + c] = w[i * cols + c];
    }
    let b = incoming.bias.data_mut();
    b[j] = b[i];
    let width = dims[layer];
    let w = layers[layer].weight.data_mut();
    for r in 0..dims[layer + 1] {
        w[r * width + j] = w[r * width + i];
    }
    MlpParams::new(layers)
}

/// Element swapping hidden neurons `i` and `j` of layer `layer`, identity
/// elsewhere.
pub fn swap_element(dims: &[usize], layer: usize, i: usize, j: usize) -> Result<GroupElement> {
    let hidden = &dims[1..dims.len() - 1];
    if layer == 0 || layer > hidden.len() {
        return Err(Error::InvalidArgument(format!("no hidden layer {layer}")));
    }
    let layers = hidden
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let mut perm: Vec<usize> = (0..n).collect();
            if k + 1 == layer {
                perm.swap(i, j);
            }
            LayerMonomial::new(perm, vec![1.0; n])
        })
        .collect::<Result<_>>()?;
    Ok(MonomialElement::new(layers).into())
}

/// Sample sizes and shapes used by [`run_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub samples: usize,
    pub seed: u64,
    pub mlp_dims: Vec<usize>,
    pub conv_channels: Vec<usize>,
    pub conv_windows: Vec<usize>,
    /// `(d, d_h, h)`.
    pub mha: (usize, usize, usize),
    /// Monomial diagonal entries are drawn from `[1, max_scale]`.
    pub max_scale: f64,
    pub gl_spread: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            seed: 0,
            mlp_dims: vec![3, 6, 5, 2],
            conv_channels: vec![2, 5, 4, 1],
            conv_windows: vec![3, 2, 2],
            mha: (8, 4, 2),
            max_scale: 1e3,
            gl_spread: 1.0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidArgument("property suite needs at least one sample".into()));
        }
        if self.mlp_dims.len() < 3 || self.conv_channels.len() < 3 {
            return Err(Error::InvalidArgument("suite networks need at least one hidden layer".into()));
        }
        let (d, dh, h) = self.mha;
        if d == 0 || dh == 0 || h == 0 || dh > d {
            return Err(Error::InvalidArgument(format!("attention shape {:?}", self.mha)));
        }
        if !(self.max_scale >= 1.0 && self.max_scale.is_finite() && self.gl_spread > 0.0 && self.gl_spread.is_finite())
        {
            return Err(Error::InvalidArgument("scale and spread must be finite and positive".into()));
        }
        Ok(())
    }

    fn mlp(&self, rng: &mut ChaCha8Rng) -> Result<NetParams> {
        Ok(MlpParams::random(&self.mlp_dims, 1.0, rng)?.into())
    }

    fn mha_block(&self, rng: &mut ChaCha8Rng) -> Result<MhaBlockParams> {
        let (d, dh, h) = self.mha;
        MhaBlockParams::random(d, dh, h, Some(d), 1.0, rng)
    }

    fn monomial(&self, dims: &[usize], high: f64, rng: &mut ChaCha8Rng) -> Result<GroupElement> {
        Ok(sample_monomial(dims, 1.0, high, true, rng)?.into())
    }

    fn gl(&self, rng: &mut ChaCha8Rng) -> Result<GroupElement> {
        Ok(sample_gl(self.mha.2, self.mha.1, self.gl_spread, rng)?.into())
    }

    fn gl_conditioned(&self, rng: &mut ChaCha8Rng) -> Result<GroupElement> {
        Ok(sample_gl_conditioned(self.mha.2, self.mha.1, self.gl_spread, GL_MAX_CONDITION, rng)?.into())
    }
}

/// Condition-number cap for GL factors used in the cocycle identities, where
/// products of several elements and inverses compound rounding.
pub const GL_MAX_CONDITION: f64 = 20.0;

fn condition_number(m: &Tensor) -> f64 {
    match singular_values(m) {
        Ok(sv) if sv.last().is_some_and(|&s| s > 0.0) => sv[0] / sv[sv.len() - 1],
        _ => f64::INFINITY,
    }
}

/// [`sample_gl`] restricted to elements whose factors all have 2-norm
/// condition number at most `max_cond`.
pub fn sample_gl_conditioned(
    h: usize,
    d_h: usize,
    spread: f64,
    max_cond: f64,
    rng: &mut impl Rng,
) -> Result<GlMhaElement> {
    const ATTEMPTS: usize = 10_000;
    for _ in 0..ATTEMPTS {
        let g = sample_gl(h, d_h, spread, rng)?;
        if g.u().iter().chain(g.v()).all(|m| condition_number(m) <= max_cond) {
            return Ok(g);
        }
    }
    Err(Error::SamplerExhausted(ATTEMPTS))
}

/// Scales used by the algebraic identities; large enough to exercise the
/// group, small enough that the comparison is not dominated by rounding.
const ALGEBRA_SCALE: f64 = 10.0;

type Check = fn(&SuiteConfig, &mut ChaCha8Rng) -> Result<PropertyReport>;

fn action_fidelity_mlp(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<PropertyReport> {
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.samples {
        let p = cfg.mlp(rng)?;
        let q = cfg.monomial(&cfg.mlp_dims, cfg.max_scale, rng)?.act(&p)?;
        worst = worst.max(check_functional_equiv(&p, &q, 4, 1.0, f64::INFINITY, rng)?.max_abs_diff);
    }
    Ok(PropertyReport::new("action_fidelity_mlp", cfg.samples, worst, 1e-8))
}

fn action_fidelity_conv(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<PropertyReport> {
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.samples {
        let p: NetParams = Conv1dParams::random(&cfg.conv_channels, &cfg.conv_windows, 1.0, rng)?.into();
        let q = cfg.monomial(&cfg.conv_channels, cfg.max_scale, rng)?.act(&p)?;
        worst = worst.max(check_functional_equiv(&p, &q, 4, 1.0, f64::INFINITY, rng)?.max_abs_diff);
    }
    Ok(PropertyReport::new("action_fidelity_conv", cfg.samples, worst, 1e-8))
}

fn action_fidelity_mha(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<PropertyReport> {
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.samples {
        let p: NetParams = cfg.mha_block(rng)?.into();
        let q = cfg.gl(rng)?.act(&p)?;
        worst = worst.max(check_functional_equiv(&p, &q, 4, 1.0, f64::INFINITY, rng)?.max_rel_diff);
    }
    Ok(PropertyReport::new("action_fidelity_mha", cfg.samples, worst, 1e-6))
}

fn invariant_pool_check(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<PropertyReport> {
    let beta = EquivStack::new(&[4, 3], rng);
    let pool = |x: &NetParams| -> Result<Vec<f64>> { Ok(invariant_pool(&beta.apply(&lift(&[x])?)?)?.data().to_vec()) };
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.samples {
        let p = cfg.mlp(rng)?;
        let q = cfg.monomial(&cfg.mlp_dims, cfg.max_scale, rng)?.act(&p)?;
        worst = worst.max(relative_residual(&pool(&p)?, &pool(&q)?));
    }
    Ok(PropertyReport::new("invariant_pool", cfg.samples, worst, 1e-9))
}

fn monomial_pairs(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(GroupElement, NetParams)>> {
    (0..cfg.samples).map(|_| Ok((cfg.monomial(&cfg.mlp_dims, ALGEBRA_SCALE, rng)?, cfg.mlp(rng)?))).collect()
}

fn gl_pairs(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(GroupElement, NetParams)>> {
    (0..cfg.samples).map(|_| Ok((cfg.gl(rng)?, cfg.mha_block(rng)?.into()))).collect()
}

fn strict_zero_eps(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<PropertyReport> {
    let template = cfg.mlp(rng)?;
    let layer = MonomialQuasi::random(&template, &[4, 3], 0.0, rng);
    let pairs = monomial_pairs(cfg, rng)?;
    check_strict("strict_equivariance_zero_eps", &|x: &NetParams| layer.apply(x), &pairs, 1e-10)
}

fn witness_monomial(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<PropertyReport> {
    let template = cfg.mlp(rng)?;
    let layer = MonomialQuasi::random(&template, &[4, 3], SCALE_EPS_MAX, rng);
    check_witness("witness_monomial", &layer, &monomial_pairs(cfg, rng)?, 1e-9)
}

fn witness_gl(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<PropertyReport> {
    let layer = GlQuasi::random(&cfg.mha_block(rng)?, f64::INFINITY, rng);
    check_witness("witness_gl", &layer, &gl_pairs(cfg, rng)?, 1e-9)
}

fn triples_from(
    pairs: Vec<(GroupElement, NetParams)>,
    extra: Vec<GroupElement>,
) -> Vec<(GroupElement, GroupElement, NetParams)> {
    pairs.into_iter().zip(extra).map(|((g1, x), g2)| (g1, g2, x)).collect()
}

fn cocycle_monomial(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<PropertyReport> {
    let template = cfg.mlp(rng)?;
    let layer = MonomialQuasi::random(&template, &[2], SCALE_EPS_MAX, rng);
    let pairs = monomial_pairs(cfg, rng)?;
    let extra = (0..cfg.samples).map(|_| cfg.monomial(&cfg.mlp_dims, ALGEBRA_SCALE, rng)).collect::<Result<_>>()?;
    check_cocycle("cocycle_monomial", &|g, x| layer.lifted(g, x), &triples_from(pairs, extra), 1e-9)
}

fn cocycle_gl(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<PropertyReport> {
    let layer = GlQuasi::random(&cfg.mha_block(rng)?, f64::INFINITY, rng);
    let pairs = (0..cfg.samples)
        .map(|_| Ok((cfg.gl_conditioned(rng)?, cfg.mha_block(rng)?.into())))
        .collect::<Result<Vec<_>>>()?;
    let extra = (0..cfg.samples).map(|_| cfg.gl_conditioned(rng)).collect::<Result<_>>()?;
    check_cocycle("cocycle_gl", &|g, x| layer.lifted(g, x), &triples_from(pairs, extra), 1e-9)
}

fn gauge_monomial(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<PropertyReport> {
    let template = cfg.mlp(rng)?;
    let layer = MonomialQuasi::random(&template, &[2], SCALE_EPS_MAX, rng);
    let gauge = MonomialQuasi::random(&template, &[1], SCALE_EPS_MAX, rng);
    let pairs = monomial_pairs(cfg, rng)?;
    let extra = (0..cfg.samples).map(|_| cfg.monomial(&cfg.mlp_dims, ALGEBRA_SCALE, rng)).collect::<Result<_>>()?;
    check_gauge(
        "gauge_monomial",
        &|g, x| layer.lifted(g, x),
        &|x| gauge.alpha_hat(x),
        &triples_from(pairs, extra),
        1e-9,
    )
}

fn coboundary_strict(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<PropertyReport> {
    let template = cfg.mlp(rng)?;
    let layer = MonomialQuasi::random(&template, &[4, 3], SCALE_EPS_MAX, rng);
    check_coboundary("coboundary_strict", &layer, &monomial_pairs(cfg, rng)?, 1e-10)
}

fn stabilizer_duplicate(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<PropertyReport> {
    let template = cfg.mlp(rng)?;
    let layer = MonomialQuasi::random(&template, &[4, 3], SCALE_EPS_MAX, rng);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for _ in 0..cfg.samples {
        let base = MlpParams::random(&cfg.mlp_dims, 1.0, rng)?;
        let width = cfg.mlp_dims[1];
        let i = rng.random_range(0..width);
        let j = (i + rng.random_range(1..width)) % width;
        let x: NetParams = duplicate_neuron(&base, 1, i, j)?.into();
        let stab = [GroupElement::identity_for(&x), swap_element(&cfg.mlp_dims, 1, i, j)?];
        let r = check_stabilizer_consistency("stabilizer_duplicate", &layer, &x, &stab, 1e-10)?;
        worst = worst.max(r.max_residual);
        n += r.samples;
    }
    Ok(PropertyReport::new("stabilizer_duplicate", n, worst, 1e-10))
}

fn composition_witness(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<PropertyReport> {
    let template = cfg.mlp(rng)?;
    let first = MonomialQuasi::random(&template, &[3], SCALE_EPS_MAX, rng);
    let dims = template.dims();
    let mut net = ScaleNet::new(stat_features(&template).len(), &dims[1..dims.len() - 1], rng);
    net.freeze_eps(SCALE_EPS_MAX);
    let second = FeatureQuasi { net, beta: EquivStack::with_input(first.beta.out_channels(), &[2], rng) };
    let layer = Composed { first, second };
    let pairs = monomial_pairs(cfg, rng)?;
    check_witness("composition_witness", &layer, &pairs, 1e-9)
}

/// Every check of the suite, by name.
pub const SUITE: [(&str, Check); 13] = [
    ("action_fidelity_conv", action_fidelity_conv),
    ("action_fidelity_mha", action_fidelity_mha),
    ("action_fidelity_mlp", action_fidelity_mlp),
    ("coboundary_strict", coboundary_strict),
    ("cocycle_gl", cocycle_gl),
    ("cocycle_monomial", cocycle_monomial),
    ("composition_witness", composition_witness),
    ("gauge_monomial", gauge_monomial),
    ("invariant_pool", invariant_pool_check),
    ("stabilizer_duplicate", stabilizer_duplicate),
    ("strict_equivariance_zero_eps", strict_zero_eps),
    ("witness_gl", witness_gl),
    ("witness_monomial", witness_monomial),
];

pub fn suite_names() -> Vec<&'static str> {
    SUITE.iter().map(|(n, _)| *n).collect()
}

/// Runs the named checks (all when `only` is empty) in parallel. Each check
/// draws from its own stream of `cfg.seed`, so results do not depend on
/// scheduling. A fault injected on the calling thread is propagated.
pub fn run_suite(cfg: &SuiteConfig, only: &[&str]) -> Result<Vec<PropertyReport>> {
    cfg.validate()?;
    if let Some(bad) = only.iter().find(|n| !SUITE.iter().any(|(name, _)| name == *n)) {
        return Err(Error::InvalidArgument(format!("unknown property `{bad}`")));
    }
    let fault = current_fault();
    let selected: Vec<(u64, &(&str, Check))> = SUITE
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| only.is_empty() || only.contains(name))
        .map(|(k, c)| (k as u64, c))
        .collect();
    let mut reports = selected
        .par_iter()
        .map(|(stream, (_, check))| {
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(*stream);
                check(cfg, &mut rng)
            };
            match fault {
                Some(f) => with_fault(f, run),
                None => run(),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    reports.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(reports)
}

pub fn all_pass(reports: &[PropertyReport]) -> bool {
    reports.iter().all(|r| r.pass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symmetry::Fault;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small() -> SuiteConfig {
        SuiteConfig { samples: 10, ..SuiteConfig::default() }
    }

    #[test]
    fn identity_witness_is_identity() {
        let mut r = rng(1);
        let x: NetParams = MlpParams::random(&[3, 6, 5, 2], 1.0, &mut r).unwrap().into();
        let layer = MonomialQuasi::random(&x, &[3], 0.3, &mut r);
        let e = GroupElement::identity_for(&x);
        let (w, res) = witness_quasi_equivariance(&layer, &x, &e).unwrap();
        assert!(element_residual(&w, &e) < 1e-12);
        assert!(res < 1e-12);
    }

    #[test]
    fn zero_eps_witness_is_g() {
        let mut r = rng(2);
        let x: NetParams = MlpParams::random(&[3, 6, 5, 2], 1.0, &mut r).unwrap().into();
        let layer = MonomialQuasi::random(&x, &[3], 0.0, &mut r);
        let g: GroupElement = sample_monomial(&[3, 6, 5, 2], 1.0, 10.0, true, &mut r).unwrap().into();
        let (w, res) = witness_quasi_equivariance(&layer, &x, &g).unwrap();
        assert_eq!(element_residual(&w, &g), 0.0);
        assert!(res < 1e-12);
    }

    #[test]
    fn trivial_cocycle_passes_exactly() {
        let cfg = small();
        let mut r = rng(3);
        let pairs = monomial_pairs(&cfg, &mut r).unwrap();
        let extra = (0..cfg.samples).map(|_| cfg.monomial(&cfg.mlp_dims, 10.0, &mut r)).collect::<Result<_>>().unwrap();
        let rep = check_cocycle(
            "trivial",
            &|g: &GroupElement, _: &NetParams| Ok(g.clone()),
            &triples_from(pairs, extra),
            1e-9,
        )
        .unwrap();
        assert!(rep.pass);
        assert_eq!(rep.max_residual, 0.0);
    }

    #[test]
    fn broken_cocycle_fails() {
        let cfg = small();
        let mut r = rng(4);
        let template = cfg.mlp(&mut r).unwrap();
        let layer = MonomialQuasi::random(&template, &[2], SCALE_EPS_MAX, &mut r);
        let pairs = monomial_pairs(&cfg, &mut r).unwrap();
        let extra = (0..cfg.samples).map(|_| cfg.monomial(&cfg.mlp_dims, 10.0, &mut r)).collect::<Result<_>>().unwrap();
        let broken = |g: &GroupElement, x: &NetParams| layer.alpha_hat(&x.act_by(g)?)?.compose(g);
        let rep = check_cocycle("broken", &broken, &triples_from(pairs, extra), 1e-9).unwrap();
        assert!(!rep.pass, "{rep}");
    }

    #[test]
    fn identity_gauge_leaves_cocycle_unchanged() {
        let mut r = rng(5);
        let x: NetParams = MlpParams::random(&[3, 6, 5, 2], 1.0, &mut r).unwrap().into();
        let layer = MonomialQuasi::random(&x, &[2], SCALE_EPS_MAX, &mut r);
        let alpha = |g: &GroupElement, x: &NetParams| layer.lifted(g, x);
        let id = |x: &NetParams| Ok(GroupElement::identity_for(x));
        let transformed = gauge_transform(&alpha, &id);
        for _ in 0..5 {
            let g: GroupElement = sample_monomial(&[3, 6, 5, 2], 1.0, 10.0, true, &mut r).unwrap().into();
            assert_eq!(element_residual(&transformed(&g, &x).unwrap(), &alpha(&g, &x).unwrap()), 0.0);
        }
    }

    #[test]
    fn coboundary_fails_with_wrong_gauge() {
        // F itself (gauge = identity) is not strictly equivariant when ε > 0.
        let cfg = small();
        let mut r = rng(6);
        let template = cfg.mlp(&mut r).unwrap();
        let layer = MonomialQuasi::random(&template, &[3], SCALE_EPS_MAX, &mut r);
        let pairs = monomial_pairs(&cfg, &mut r).unwrap();
        assert!(!check_strict("f", &|x: &NetParams| layer.apply(x), &pairs, 1e-10).unwrap().pass);
        assert!(check_coboundary("f", &layer, &pairs, 1e-10).unwrap().pass);
    }

    #[test]
    fn generic_params_have_no_swap_stabilizer() {
        let mut r = rng(7);
        let dims = [3, 6, 5, 2];
        let x: NetParams = MlpParams::random(&dims, 1.0, &mut r).unwrap().into();
        for i in 0..6 {
            for j in i + 1..6 {
                assert!(!is_stabilizer(&swap_element(&dims, 1, i, j).unwrap(), &x).unwrap());
            }
        }
        assert!(is_stabilizer(&GroupElement::identity_for(&x), &x).unwrap());
        let layer = MonomialQuasi::random(&x, &[3], 0.3, &mut r);
        let bad = [swap_element(&dims, 1, 0, 1).unwrap()];
        assert!(matches!(check_stabilizer_consistency("s", &layer, &x, &bad, 1e-10), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn duplicated_neuron_is_fixed_by_swap() {
        let mut r = rng(8);
        let dims = [3, 6, 5, 2];
        let base = MlpParams::random(&dims, 1.0, &mut r).unwrap();
        let x: NetParams = duplicate_neuron(&base, 2, 1, 4).unwrap().into();
        let h = swap_element(&dims, 2, 1, 4).unwrap();
        assert!(is_stabilizer(&h, &x).unwrap());
        let layer = MonomialQuasi::random(&x, &[3], SCALE_EPS_MAX, &mut r);
        let rep = check_stabilizer_consistency("s", &layer, &x, &[h], 1e-10).unwrap();
        assert!(rep.pass, "{rep}");
    }

    #[test]
    fn suite_passes_on_defaults() {
        let reports = run_suite(&small(), &[]).unwrap();
        assert_eq!(reports.len(), SUITE.len());
        for r in &reports {
            assert!(r.pass, "{r}");
            assert_eq!(r.pass, r.max_residual < r.tolerance);
        }
    }

    #[test]
    fn suite_detects_injected_fault() {
        let only = ["action_fidelity_mlp", "action_fidelity_mha"];
        let reports = with_fault(Fault::MonomialDropInverse, || run_suite(&small(), &only).unwrap());
        assert!(!reports.iter().find(|r| r.name == "action_fidelity_mlp").unwrap().pass);
        let reports = with_fault(Fault::GlDropInverse, || run_suite(&small(), &only).unwrap());
        assert!(!reports.iter().find(|r| r.name == "action_fidelity_mha").unwrap().pass);
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(run_suite(&SuiteConfig { samples: 0, ..SuiteConfig::default() }, &[]).is_err());
        assert!(matches!(run_suite(&small(), &["nope"]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn csv_and_text_output() {
        let reports = vec![PropertyReport::new("a", 3, 1e-12, 1e-9), PropertyReport::new("b", 3, 1.0, 1e-9)];
        let mut buf = Vec::new();
        write_reports_csv(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("name,samples,max_residual,tolerance,pass\n"));
        assert!(text.contains("b,3,1.0,1e-9,false") || text.contains("b,3,1.0,0.000000001,false"), "{text}");
        let shown = format_reports(&reports);
        assert!(shown.lines().next().unwrap().starts_with("PASS a"));
        assert!(shown.lines().nth(1).unwrap().starts_with("FAIL b"));
    }
}
