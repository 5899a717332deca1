//! Quasi-equivariant layers `F(θ) = α(θ) β(θ)`: a small network reads the
//! statistics of θ and emits a group element α(θ), which then acts on the
//! output of a strictly equivariant map β.
//!
//! Because α(θ) is a group element and every read-out downstream is
//! invariant, α(θ) cancels in any invariant prediction. The layers here are
//! still exact quasi-equivariant maps on the feature space, which is what
//! the witness checks exercise.

use std::rc::Rc;

use rand::Rng;

use crate::equivlayers::{lift, scale_on_tape, EquivStack, WeightFeature, WeightFeatureVar};
use crate::error::{shape_err, Error, Result};
use crate::netmodels::{MhaBlockParams, NetParams};
use crate::numcore::{Dense, DenseVars, Tape, Tensor, Var};
use crate::statfeat::{mha_stat_features, stat_features};
use crate::symmetry::{GlMhaElement, LayerMonomial, MonomialElement};

pub const EPS_INIT: f64 = 0.01;
pub const SCALE_EPS_MAX: f64 = 0.5;
pub const ALPHA_HIDDEN: usize = 32;

/// Two-layer perceptron whose hidden layer gates itself: `h = z * sigmoid(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedMlp {
    pub inner: Dense,
    pub outer: Dense,
}

#[derive(Debug, Clone, Copy)]
pub struct GatedMlpVars {
    pub inner: DenseVars,
    pub outer: DenseVars,
}

impl GatedMlp {
    pub fn new(fan_in: usize, hidden: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self { inner: Dense::xavier(fan_in, hidden, rng), outer: Dense::xavier(hidden, fan_out, rng) }
    }

    pub fn num_params(&self) -> usize {
        self.inner.num_params() + self.outer.num_params()
    }

    pub fn bind(&self, tape: &Tape) -> GatedMlpVars {
        GatedMlpVars { inner: self.inner.bind(tape), outer: self.outer.bind(tape) }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let [a, b] = self.inner.tensors_mut();
        let [c, d] = self.outer.tensors_mut();
        vec![a, b, c, d]
    }

    /// Rows of `x: [batch, in]` to `[batch, out]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.inner.apply(x)?;
        let h = z.map(|v| v * crate::numcore::autodiff::sigmoid(v));
        self.outer.apply(&h)
    }
}

impl GatedMlpVars {
    fn from_vars(v: &[Var]) -> Self {
        Self { inner: DenseVars { weight: v[0], bias: v[1] }, outer: DenseVars { weight: v[2], bias: v[3] } }
    }

    fn vars(&self) -> Vec<Var> {
        let mut v = self.inner.vars().to_vec();
        v.extend(self.outer.vars());
        v
    }

    pub fn apply(&self, tape: &Tape, x: Var) -> Result<Var> {
        let z = self.inner.apply(tape, x)?;
        self.outer.apply(tape, tape.silu(z))
    }
}

/// Emits one positive scale vector `s_i = 1 + ε_i sin(γ_i(stats))` per hidden
/// layer, with `ε_i` clamped to `[0, 0.5]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleNet {
    nets: Vec<GatedMlp>,
    eps: Vec<Tensor>,
    learn_eps: bool,
    stat_len: usize,
}

#[derive(Debug, Clone)]
pub struct ScaleNetVars {
    nets: Vec<GatedMlpVars>,
    eps: Vec<Var>,
    learn_eps: bool,
}

impl ScaleNet {
    /// One gated perceptron per entry of `hidden_dims` (`[n_1, ..., n_{L-1}]`).
    pub fn new(stat_len: usize, hidden_dims: &[usize], rng: &mut impl Rng) -> Self {
        Self {
            nets: hidden_dims.iter().map(|&n| GatedMlp::new(stat_len, ALPHA_HIDDEN, n, rng)).collect(),
            eps: vec![Tensor::scalar(EPS_INIT).reshape(&[1]).expect("one element"); hidden_dims.len()],
            learn_eps: true,
            stat_len,
        }
    }

    pub fn stat_len(&self) -> usize {
        self.stat_len
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.nets.iter().map(|n| n.outer.fan_out()).collect()
    }

    pub fn nets(&self) -> &[GatedMlp] {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut [GatedMlp] {
        &mut self.nets
    }

    /// Effective (clamped) ε per hidden layer.
    pub fn eps(&self) -> Vec<f64> {
        self.eps.iter().map(|e| e.data()[0].clamp(0.0, SCALE_EPS_MAX)).collect()
    }

    pub fn learns_eps(&self) -> bool {
        self.learn_eps
    }

    /// Sets every ε to `value` and stops it from being trained.
    pub fn freeze_eps(&mut self, value: f64) {
        for e in &mut self.eps {
            *e = Tensor::scalar(value).reshape(&[1]).expect("one element");
        }
        self.learn_eps = false;
    }

    pub fn num_params(&self) -> usize {
        self.nets.iter().map(GatedMlp::num_params).sum::<usize>() + if self.learn_eps { self.eps.len() } else { 0 }
    }

    /// Trainable tensors, in the order of [`ScaleNetVars::vars`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let learn = self.learn_eps;
        let mut out = Vec::new();
        for (net, eps) in self.nets.iter_mut().zip(self.eps.iter_mut()) {
            out.extend(net.tensors_mut());
            if learn {
                out.push(eps);
            }
        }
        out
    }

    /// Keeps every ε inside its admissible range after an update.
    pub fn project(&mut self) {
        for e in &mut self.eps {
            let v = e.data()[0].clamp(0.0, SCALE_EPS_MAX);
            *e = Tensor::scalar(v).reshape(&[1]).expect("one element");
        }
    }

    pub fn bind(&self, tape: &Tape) -> ScaleNetVars {
        ScaleNetVars {
            nets: self.nets.iter().map(|n| n.bind(tape)).collect(),
            eps: self.eps.iter().map(|e| tape.leaf(e.clone())).collect(),
            learn_eps: self.learn_eps,
        }
    }

    /// Builds the tape view from existing variables given in
    /// [`ScaleNet::tensors_mut`] order. A frozen ε is recorded as a constant.
    pub fn bind_from(&self, tape: &Tape, vars: &[Var]) -> Result<ScaleNetVars> {
        let per = 4 + usize::from(self.learn_eps);
        if vars.len() != per * self.nets.len() {
            return Err(shape_err(format!("scale net takes {} variables, got {}", per * self.nets.len(), vars.len())));
        }
        let mut nets = Vec::with_capacity(self.nets.len());
        let mut eps = Vec::with_capacity(self.nets.len());
        for (chunk, e) in vars.chunks(per).zip(&self.eps) {
            nets.push(GatedMlpVars::from_vars(&chunk[..4]));
            eps.push(if self.learn_eps { chunk[4] } else { tape.leaf(e.clone()) });
        }
        Ok(ScaleNetVars { nets, eps, learn_eps: self.learn_eps })
    }

    /// Scale vectors for one statistics vector.
    pub fn scale_forward(&self, stats: &Tensor) -> Result<Vec<Tensor>> {
        if stats.len() != self.stat_len {
            return Err(shape_err(format!("scale net expects {} statistics, got {}", self.stat_len, stats.len())));
        }
        let x = stats.reshape(&[1, self.stat_len])?;
        self.nets
            .iter()
            .zip(self.eps())
            .map(|(net, eps)| {
                let out = net.apply(&x)?;
                let n = out.len();
                Ok(Tensor::from_parts(vec![n], out.data().iter().map(|z| 1.0 + eps * z.sin()).collect()))
            })
            .collect()
    }

    /// α(θ) as a monomial element with identity permutations.
    pub fn alpha(&self, theta: &NetParams) -> Result<MonomialElement> {
        scale_as_group_element(&self.scale_forward(&stat_features(theta))?)
    }
}

impl ScaleNetVars {
    /// Recorded variables in the order of [`ScaleNet::tensors_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (net, eps) in self.nets.iter().zip(&self.eps) {
            out.extend(net.vars());
            if self.learn_eps {
                out.push(*eps);
            }
        }
        out
    }

    /// Scale vectors `[batch, n_i]` for statistics `[batch, stat_len]`.
    pub fn scales(&self, tape: &Tape, stats: Var) -> Result<Vec<Var>> {
        let batch = tape.shape(stats)[0];
        self.nets
            .iter()
            .zip(&self.eps)
            .map(|(net, &eps)| {
                let out = net.apply(tape, stats)?;
                let n = tape.shape(out)[1];
                let e = if self.learn_eps { tape.clamp(eps, 0.0, SCALE_EPS_MAX) } else { eps };
                let e = tape.broadcast_to(e, &[batch, n])?;
                Ok(tape.offset(tape.mul(e, tape.sin(out))?, 1.0))
            })
            .collect()
    }
}

/// Diagonal monomial element from per-hidden-layer scales.
pub fn scale_as_group_element(scales: &[Tensor]) -> Result<MonomialElement> {
    let layers =
        scales.iter().map(|s| LayerMonomial::new((0..s.len()).collect(), s.data().to_vec())).collect::<Result<_>>()?;
    Ok(MonomialElement::new(layers))
}

/// `F(θ) = α(θ) β(lift(θ))`.
pub fn quasi_apply_mlp(net: &ScaleNet, theta: &NetParams, beta: &EquivStack) -> Result<WeightFeature> {
    let feat = beta.apply(&lift(&[theta])?)?;
    feat.act(&net.alpha(theta)?)
}

/// Tape form of the quasi scaling: `stats: [batch, stat_len]`.
pub fn quasi_scale_on_tape(
    tape: &Tape,
    vars: &ScaleNetVars,
    stats: Var,
    feat: &WeightFeatureVar,
) -> Result<WeightFeatureVar> {
    let scales = vars.scales(tape, stats)?;
    scale_on_tape(tape, feat, &scales)
}

/// Emits per-head `M_i = I + ε sin(γ(stats))` and `N_i` likewise, with `ε`
/// clamped to `[0, 1/(2 d_h)]` so both are strictly diagonally dominant.
#[derive(Debug, Clone, PartialEq)]
pub struct GlNet {
    net: GatedMlp,
    eps: Tensor,
    learn_eps: bool,
    heads: usize,
    head_dim: usize,
    stat_len: usize,
}

#[derive(Debug, Clone)]
pub struct GlNetVars {
    net: GatedMlpVars,
    eps: Var,
    learn_eps: bool,
    heads: usize,
    head_dim: usize,
}

/// Per-head `(M_i, N_i)` on a tape.
pub type GlFactorVars = Vec<(Var, Var)>;

impl GlNet {
    pub fn new(stat_len: usize, heads: usize, head_dim: usize, rng: &mut impl Rng) -> Self {
        let out = 2 * heads * head_dim * head_dim;
        Self {
            net: GatedMlp::new(stat_len, ALPHA_HIDDEN, out, rng),
            eps: Tensor::scalar(EPS_INIT.min(Self::eps_bound(head_dim))).reshape(&[1]).expect("one element"),
            learn_eps: true,
            heads,
            head_dim,
            stat_len,
        }
    }

    /// Largest admissible ε.
    pub fn eps_bound(head_dim: usize) -> f64 {
        1.0 / (2.0 * head_dim as f64)
    }

    pub fn eps(&self) -> f64 {
        self.eps.data()[0].clamp(0.0, Self::eps_bound(self.head_dim))
    }

    pub fn stat_len(&self) -> usize {
        self.stat_len
    }

    pub fn learns_eps(&self) -> bool {
        self.learn_eps
    }

    pub fn net_mut(&mut self) -> &mut GatedMlp {
        &mut self.net
    }

    pub fn freeze_eps(&mut self, value: f64) {
        self.eps = Tensor::scalar(value).reshape(&[1]).expect("one element");
        self.learn_eps = false;
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params() + usize::from(self.learn_eps)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.net.tensors_mut();
        if self.learn_eps {
            out.push(&mut self.eps);
        }
        out
    }

    pub fn project(&mut self) {
        let v = self.eps();
        self.eps = Tensor::scalar(v).reshape(&[1]).expect("one element");
    }

    pub fn bind(&self, tape: &Tape) -> GlNetVars {
        GlNetVars {
            net: self.net.bind(tape),
            eps: tape.leaf(self.eps.clone()),
            learn_eps: self.learn_eps,
            heads: self.heads,
            head_dim: self.head_dim,
        }
    }

    /// Tape view from variables in [`GlNet::tensors_mut`] order.
    pub fn bind_from(&self, tape: &Tape, vars: &[Var]) -> Result<GlNetVars> {
        let n = 4 + usize::from(self.learn_eps);
        if vars.len() != n {
            return Err(shape_err(format!("GL net takes {n} variables, got {}", vars.len())));
        }
        Ok(GlNetVars {
            net: GatedMlpVars::from_vars(&vars[..4]),
            eps: if self.learn_eps { vars[4] } else { tape.leaf(self.eps.clone()) },
            learn_eps: self.learn_eps,
            heads: self.heads,
            head_dim: self.head_dim,
        })
    }

    /// Per-head `(M_i, N_i)` for one statistics vector.
    pub fn factors(&self, stats: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
        if stats.len() != self.stat_len {
            return Err(shape_err(format!("GL net expects {} statistics, got {}", self.stat_len, stats.len())));
        }
        let out = self.net.apply(&stats.reshape(&[1, self.stat_len])?)?;
        let (dh, eps) = (self.head_dim, self.eps());
        let block = dh * dh;
        let mk = |k: usize| {
            let mut m = Tensor::eye(dh);
            for (v, z) in m.data_mut().iter_mut().zip(&out.data()[k * block..(k + 1) * block]) {
                *v += eps * z.sin();
            }
            m
        };
        Ok((0..self.heads).map(|i| (mk(i), mk(self.heads + i))).collect())
    }

    /// α(θ): identity head permutation, `U_i = M_i`, `V_i = N_i^T`. Acting
    /// with it maps head `i` to `(W^Q M^T, W^K M^{-1}, W^V N, W^O N^{-T})`.
    pub fn alpha(&self, theta: &MhaBlockParams) -> Result<GlMhaElement> {
        let factors = self.factors(&mha_stat_features(theta))?;
        let (u, v): (Vec<Tensor>, Vec<Tensor>) = factors
            .into_iter()
            .map(|(m, n)| Ok::<_, Error>((m, n.transpose()?)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        GlMhaElement::new((0..self.heads).collect(), u, v)
            .map_err(|e| Error::Numeric(format!("quasi GL factor not invertible: {e}")))
    }
}

impl GlNetVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.net.vars();
        if self.learn_eps {
            out.push(self.eps);
        }
        out
    }

    /// Factors for each row of `stats: [batch, stat_len]`.
    pub fn factors(&self, tape: &Tape, stats: Var) -> Result<Vec<GlFactorVars>> {
        let batch = tape.shape(stats)[0];
        let out = self.net.apply(tape, stats)?;
        let width = tape.shape(out)[1];
        let dh = self.head_dim;
        let block = dh * dh;
        let eps = if self.learn_eps { tape.clamp(self.eps, 0.0, GlNet::eps_bound(dh)) } else { self.eps };
        let eps = tape.broadcast_to(eps, &[dh, dh])?;
        let eye = tape.leaf(Tensor::eye(dh));
        let mut all = Vec::with_capacity(batch);
        for b in 0..batch {
            let factor = |k: usize| -> Result<Var> {
                let start = b * width + k * block;
                let idx: Rc<[usize]> = (start..start + block).collect();
                let raw = tape.gather(out, idx, &[dh, dh])?;
                tape.add(eye, tape.mul(eps, tape.sin(raw))?)
            };
            let heads =
                (0..self.heads).map(|i| Ok((factor(i)?, factor(self.heads + i)?))).collect::<Result<Vec<_>>>()?;
            all.push(heads);
        }
        Ok(all)
    }
}

/// `θ -> α(θ) θ` for an attention block.
pub fn quasi_apply_mha(net: &GlNet, theta: &MhaBlockParams) -> Result<MhaBlockParams> {
    net.alpha(theta)?.act(theta)
}

/// Tape form: transforms per-head `[q, k, v, o]` with factors `(M, N)`.
pub fn quasi_heads_on_tape(tape: &Tape, heads: &[[Var; 4]], factors: &[(Var, Var)]) -> Result<Vec<[Var; 4]>> {
    if heads.len() != factors.len() {
        return Err(shape_err(format!("{} heads but {} factor pairs", heads.len(), factors.len())));
    }
    heads
        .iter()
        .zip(factors)
        .map(|([q, k, v, o], &(m, n))| {
            let n_inv_t = tape.transpose(tape.inverse(n)?)?;
            Ok([
                tape.matmul(*q, tape.transpose(m)?)?,
                tape.matmul(*k, tape.inverse(m)?)?,
                tape.matmul(*v, n)?,
                tape.matmul(*o, n_inv_t)?,
            ])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equivlayers::{invariant_pool, mha_invariants};
    use crate::netmodels::mlp::gaussian;
    use crate::netmodels::MlpParams;
    use crate::numcore::linalg::det;
    use crate::statfeat::stat_len;
    use crate::symmetry::{check_functional_equiv, sample_monomial};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (NetParams, ScaleNet, EquivStack, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: NetParams = MlpParams::random(&[2, 6, 5, 2], 1.0, &mut rng).unwrap().into();
        let net = ScaleNet::new(stat_len(&theta), &[6, 5], &mut rng);
        let beta = EquivStack::new(&[4, 3], &mut rng);
        (theta, net, beta, rng)
    }

    fn rel(a: &Tensor, b: &Tensor) -> f64 {
        a.max_abs_diff(b).unwrap() / a.max_abs().max(1e-300)
    }

    #[test]
    fn zero_eps_gives_unit_scales() {
        let (theta, mut net, beta, _) = setup(1);
        net.freeze_eps(0.0);
        let s = net.scale_forward(&stat_features(&theta)).unwrap();
        assert!(s.iter().all(|v| v.data().iter().all(|&x| x == 1.0)));
        let f = quasi_apply_mlp(&net, &theta, &beta).unwrap();
        assert_eq!(f, beta.apply(&lift(&[&theta]).unwrap()).unwrap());
    }

    #[test]
    fn direct_formula_with_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = ScaleNet::new(4, &[3], &mut rng);
        let g = &mut net.nets_mut()[0];
        g.inner = Dense::zeros(4, ALPHA_HIDDEN);
        g.outer = Dense::zeros(ALPHA_HIDDEN, 3);
        g.outer.bias = Tensor::filled(&[3], std::f64::consts::FRAC_PI_2);
        let s = net.scale_forward(&Tensor::ones(&[4])).unwrap();
        assert!(s[0].data().iter().all(|&v| v == 1.01));
    }

    #[test]
    fn scales_stay_in_band() {
        let (_, net, _, mut rng) = setup(3);
        for _ in 0..200 {
            let stats = gaussian(&[net.stat_len()], 10.0, &mut rng);
            for s in net.scale_forward(&stats).unwrap() {
                assert!(s.data().iter().all(|&v| (0.99..=1.01).contains(&v)));
            }
        }
    }

    #[test]
    fn witness_identity_holds() {
        let (theta, net, beta, mut rng) = setup(4);
        let f = quasi_apply_mlp(&net, &theta, &beta).unwrap();
        for _ in 0..10 {
            let g = sample_monomial(&[2, 6, 5, 2], 1.0, 100.0, true, &mut rng).unwrap();
            let moved = crate::symmetry::GroupElement::from(g.clone()).act(&theta).unwrap();
            let fg = quasi_apply_mlp(&net, &moved, &beta).unwrap();
            let witness =
                net.alpha(&moved).unwrap().compose(&g).unwrap().compose(&net.alpha(&theta).unwrap().inverse()).unwrap();
            assert!(rel(&fg.data, &f.act(&witness).unwrap().data) < 1e-9);
            assert!(rel(&invariant_pool(&f).unwrap(), &invariant_pool(&fg).unwrap()) < 1e-9);
        }
    }

    #[test]
    fn tape_scaling_matches_plain() {
        let (theta, net, beta, _) = setup(5);
        let plain = quasi_apply_mlp(&net, &theta, &beta).unwrap();
        let tape = Tape::new();
        let vars = net.bind(&tape);
        let bvars = beta.bind(&tape);
        let feat = beta.apply_on_tape(&tape, &bvars, &lift(&[&theta]).unwrap().on_tape(&tape)).unwrap();
        let st = stat_features(&theta);
        let stats = tape.leaf(st.reshape(&[1, st.len()]).unwrap());
        let out = quasi_scale_on_tape(&tape, &vars, stats, &feat).unwrap().value(&tape);
        assert!(rel(&plain.data, &out.data) < 1e-14);
    }

    fn mha_setup(seed: u64) -> (MhaBlockParams, GlNet, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = MhaBlockParams::random(8, 4, 2, Some(8), 1.0, &mut rng).unwrap();
        let net = GlNet::new(56, 2, 4, &mut rng);
        (theta, net, rng)
    }

    #[test]
    fn gl_factors_are_well_conditioned() {
        let (_, mut net, mut rng) = mha_setup(6);
        net.eps = Tensor::vector(vec![0.01]).unwrap();
        let mut min_det = f64::INFINITY;
        for _ in 0..500 {
            let stats = gaussian(&[56], 5.0, &mut rng);
            for (m, n) in net.factors(&stats).unwrap() {
                min_det = min_det.min(det(&m).unwrap().abs()).min(det(&n).unwrap().abs());
            }
        }
        assert!(min_det > 0.9, "{min_det}");
        assert!(min_det > (1.0f64 - 4.0 * 0.01).powi(4));
    }

    #[test]
    fn eps_is_bounded_by_head_dim() {
        let (_, mut net, _) = mha_setup(7);
        net.eps = Tensor::vector(vec![3.0]).unwrap();
        assert_eq!(net.eps(), 0.125);
    }

    #[test]
    fn gl_zero_eps_is_identity() {
        let (theta, mut net, _) = mha_setup(8);
        net.freeze_eps(0.0);
        assert_eq!(quasi_apply_mha(&net, &theta).unwrap(), theta);
    }

    #[test]
    fn quasi_mha_preserves_products_and_function() {
        let (theta, mut net, mut rng) = mha_setup(9);
        net.eps = Tensor::vector(vec![0.1]).unwrap();
        let out = quasi_apply_mha(&net, &theta).unwrap();
        let (a, b) = (mha_invariants(&theta), mha_invariants(&out));
        for (x, y) in a.a.iter().zip(&b.a).chain(a.b.iter().zip(&b.b)) {
            assert!(rel(x, y) < 1e-10);
        }
        let r = check_functional_equiv(&theta.into(), &out.into(), 50, 1.0, 1e-8, &mut rng).unwrap();
        assert!(r.max_rel_diff < 1e-8);
    }

    #[test]
    fn quasi_heads_on_tape_matches_plain() {
        let (theta, mut net, _) = mha_setup(10);
        net.eps = Tensor::vector(vec![0.1]).unwrap();
        let plain = quasi_apply_mha(&net, &theta).unwrap();
        let tape = Tape::new();
        let vars = net.bind(&tape);
        let st = mha_stat_features(&theta);
        let factors = vars.factors(&tape, tape.leaf(st.reshape(&[1, 56]).unwrap())).unwrap();
        let heads: Vec<[Var; 4]> =
            theta.heads().iter().map(|h| [0, 1, 2, 3].map(|r| tape.leaf(h.get(r).clone()))).collect();
        let out = quasi_heads_on_tape(&tape, &heads, &factors[0]).unwrap();
        for (h, vs) in plain.heads().iter().zip(&out) {
            for (r, v) in vs.iter().enumerate() {
                assert!(tape.value(*v).max_abs_diff(h.get(r)).unwrap() < 1e-12);
            }
        }
    }
}
