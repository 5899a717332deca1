//! Monomial-equivariant feature maps over network parameters and the
//! invariant read-outs that follow them.
//!
//! A [`WeightFeature`] stores `c` channels for a batch of `B` networks of one
//! shape as a `[c, B * P]` matrix, where `P` is the parameter count of one
//! network laid out layer by layer (weights row-major, then bias). Channel
//! mixing is then a single matrix product and the group acts on the column
//! axis only.

use std::rc::Rc;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::netmodels::{Conv1dParams, ConvLayer, DenseLayer, MhaBlockParams, MlpParams, NetParams};
use crate::numcore::{Dense, Tape, Tensor, Var};
use crate::symmetry::monomial::act_block;
use crate::symmetry::MonomialElement;

/// Norms are floored at this value before dividing.
pub const NORM_EPS: f64 = 1e-12;

/// Shape of one network inside a feature: layer widths, window per layer
/// (1 for dense layers) and offsets into the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    dims: Vec<usize>,
    windows: Vec<usize>,
    weight_off: Vec<usize>,
    bias_off: Vec<usize>,
    per_net: usize,
}

impl FeatureLayout {
    pub fn new(dims: Vec<usize>, windows: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || windows.len() != dims.len() - 1 || dims.iter().chain(&windows).any(|&d| d == 0) {
            return Err(shape_err(format!("feature layout dims {dims:?}, windows {windows:?}")));
        }
        let mut weight_off = Vec::new();
        let mut bias_off = Vec::new();
        let mut off = 0;
        for i in 1..dims.len() {
            weight_off.push(off);
            off += dims[i] * dims[i - 1] * windows[i - 1];
            bias_off.push(off);
            off += dims[i];
        }
        Ok(Self { dims, windows, weight_off, bias_off, per_net: off })
    }

    pub fn for_params(params: &NetParams) -> Result<Self> {
        match params {
            NetParams::Mlp(p) => Self::new(p.dims(), vec![1; p.num_layers()]),
            NetParams::Conv1d(p) => Self::new(p.channels(), p.windows()),
            NetParams::Mha(_) => Err(Error::Architecture("attention blocks have no monomial layout".into())),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn windows(&self) -> &[usize] {
        &self.windows
    }

    pub fn num_layers(&self) -> usize {
        self.windows.len()
    }

    /// Parameters per network.
    pub fn per_net(&self) -> usize {
        self.per_net
    }

    /// Length of the pooled vector per channel.
    pub fn pooled_per_channel(&self) -> usize {
        let l = self.num_layers();
        if l == 1 {
            return self.dims[0] * self.windows[0] + 1;
        }
        let first = self.dims[0] * self.windows[0] + 1;
        let last = self.dims[l] * self.windows[l - 1] + self.dims[l];
        first + 2 * (l - 2) + last
    }

    fn flatten_into(&self, params: &NetParams, out: &mut Vec<f64>) -> Result<()> {
        let layout = Self::for_params(params)?;
        if &layout != self {
            return Err(shape_err(format!("network dims {:?} do not match layout {:?}", layout.dims, self.dims)));
        }
        match params {
            NetParams::Mlp(p) => {
                for l in p.layers() {
                    out.extend_from_slice(l.weight.data());
                    out.extend_from_slice(l.bias.data());
                }
            }
            NetParams::Conv1d(p) => {
                for l in p.layers() {
                    out.extend_from_slice(l.filter.data());
                    out.extend_from_slice(l.bias.data());
                }
            }
            NetParams::Mha(_) => unreachable!("rejected by for_params"),
        }
        Ok(())
    }
}

/// Channelized features of a batch of networks, `data: [c, B * P]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFeature {
    pub layout: Rc<FeatureLayout>,
    pub batch: usize,
    pub data: Tensor,
}

/// [`WeightFeature`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct WeightFeatureVar {
    pub layout: Rc<FeatureLayout>,
    pub batch: usize,
    pub channels: usize,
    pub data: Var,
}

impl WeightFeature {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn on_tape(&self, tape: &Tape) -> WeightFeatureVar {
        WeightFeatureVar {
            layout: self.layout.clone(),
            batch: self.batch,
            channels: self.channels(),
            data: tape.leaf(self.data.clone()),
        }
    }

    /// Weight block `[n_i, n_{i-1}, w_i]` of layer `layer` (1-based) for one
    /// channel and batch entry.
    pub fn weight(&self, channel: usize, entry: usize, layer: usize) -> Tensor {
        let lay = &self.layout;
        let shape = vec![lay.dims[layer], lay.dims[layer - 1], lay.windows[layer - 1]];
        let start = self.offset(channel, entry) + lay.weight_off[layer - 1];
        let n: usize = shape.iter().product();
        Tensor::from_parts(shape, self.data.data()[start..start + n].to_vec())
    }

    pub fn bias(&self, channel: usize, entry: usize, layer: usize) -> Tensor {
        let n = self.layout.dims[layer];
        let start = self.offset(channel, entry) + self.layout.bias_off[layer - 1];
        Tensor::from_parts(vec![n], self.data.data()[start..start + n].to_vec())
    }

    fn offset(&self, channel: usize, entry: usize) -> usize {
        (channel * self.batch + entry) * self.layout.per_net
    }

    /// Reads channel `channel` of batch entry `entry` back as network
    /// parameters.
    pub fn to_params(&self, channel: usize, entry: usize) -> Result<NetParams> {
        let lay = &self.layout;
        if lay.windows.iter().all(|&w| w == 1) {
            let layers = (1..=lay.num_layers())
                .map(|i| {
                    let w = self.weight(channel, entry, i);
                    Ok(DenseLayer { weight: w.reshape(&w.shape()[..2])?, bias: self.bias(channel, entry, i) })
                })
                .collect::<Result<_>>()?;
            Ok(MlpParams::new(layers)?.into())
        } else {
            let layers = (1..=lay.num_layers())
                .map(|i| ConvLayer { filter: self.weight(channel, entry, i), bias: self.bias(channel, entry, i) })
                .collect();
            Ok(Conv1dParams::new(layers)?.into())
        }
    }

    /// Applies `g` to every channel of every batch entry.
    pub fn act(&self, g: &MonomialElement) -> Result<WeightFeature> {
        let lay = &self.layout;
        if g.hidden_dims() != lay.dims[1..lay.dims.len() - 1] {
            return Err(shape_err("group element does not fit the feature layout"));
        }
        let mut out = Vec::with_capacity(self.data.len());
        for block in self.data.data().chunks(lay.per_net) {
            for i in 1..=lay.num_layers() {
                let (rows, cols, inner) = (lay.dims[i], lay.dims[i - 1], lay.windows[i - 1]);
                let w = &block[lay.weight_off[i - 1]..lay.bias_off[i - 1]];
                out.extend(act_block(w, rows, cols, inner, g.at(i), g.at(i - 1)));
                let b = &block[lay.bias_off[i - 1]..lay.bias_off[i - 1] + rows];
                out.extend(act_block(b, rows, 1, 1, g.at(i), None));
            }
        }
        Ok(WeightFeature {
            layout: self.layout.clone(),
            batch: self.batch,
            data: Tensor::from_parts(self.data.shape().to_vec(), out),
        })
    }
}

impl WeightFeatureVar {
    pub fn value(&self, tape: &Tape) -> WeightFeature {
        WeightFeature { layout: self.layout.clone(), batch: self.batch, data: tape.value(self.data) }
    }

    fn with_data(&self, data: Var, channels: usize) -> Self {
        Self { layout: self.layout.clone(), batch: self.batch, channels, data }
    }
}

/// One-channel feature holding a batch of networks of identical shape.
pub fn lift(params: &[&NetParams]) -> Result<WeightFeature> {
    let first = params.first().ok_or_else(|| Error::InvalidArgument("lift of an empty batch".into()))?;
    let layout = FeatureLayout::for_params(first)?;
    let mut data = Vec::with_capacity(layout.per_net * params.len());
    for p in params {
        layout.flatten_into(p, &mut data)?;
    }
    let n = data.len();
    Ok(WeightFeature { layout: Rc::new(layout), batch: params.len(), data: Tensor::from_parts(vec![1, n], data) })
}

/// Contracts the channel axis with `mix: [c', c]`. `bias: [c']` is added to
/// the output layer's bias features only, where the group acts trivially.
pub fn channel_mix_on_tape(tape: &Tape, mix: Var, bias: Var, feat: &WeightFeatureVar) -> Result<WeightFeatureVar> {
    let ms = tape.shape(mix);
    if ms.len() != 2 || ms[1] != feat.channels || tape.shape(bias) != [ms[0]] {
        return Err(shape_err(format!(
            "channel mix {ms:?} with bias {:?} on {} channels",
            tape.shape(bias),
            feat.channels
        )));
    }
    let out_c = ms[0];
    let mixed = tape.matmul(mix, feat.data)?;
    let lay = &feat.layout;
    let cols = feat.batch * lay.per_net;
    let last = lay.num_layers() - 1;
    let (start, len) = (lay.bias_off[last], lay.dims[last + 1]);
    // Index 0 of the padded bias is a zero; output-bias slots point at their
    // channel's entry.
    let padded = tape.concat(&[tape.leaf(Tensor::zeros(&[1])), bias])?;
    let mut idx = vec![0usize; out_c * cols];
    for ch in 0..out_c {
        for b in 0..feat.batch {
            let base = ch * cols + b * lay.per_net + start;
            idx[base..base + len].fill(ch + 1);
        }
    }
    let spread = tape.gather(padded, idx.into(), &[out_c, cols])?;
    Ok(feat.with_data(tape.add(mixed, spread)?, out_c))
}

pub fn equiv_relu_on_tape(tape: &Tape, feat: &WeightFeatureVar) -> WeightFeatureVar {
    feat.with_data(tape.relu(feat.data), feat.channels)
}

/// Multiplies each hidden unit's outgoing row by `s_i[r]` and its incoming
/// column in the next layer by `1 / s_i[r]`. `scales[i-1]: [B, n_i]` holds
/// the scales of hidden layer `i` for every batch entry.
pub fn scale_on_tape(tape: &Tape, feat: &WeightFeatureVar, scales: &[Var]) -> Result<WeightFeatureVar> {
    let lay = &feat.layout;
    let hidden = &lay.dims[1..lay.dims.len() - 1];
    if scales.len() != hidden.len() {
        return Err(shape_err(format!("{} scale vectors for {} hidden layers", scales.len(), hidden.len())));
    }
    if scales.is_empty() {
        return Ok(feat.clone());
    }
    let batch = feat.batch;
    // Flat scale table: slot 0 is the fixed boundary value 1, then each
    // hidden layer's [B, n_i] block.
    let mut parts = vec![tape.leaf(Tensor::ones(&[1]))];
    let mut table_off = vec![0usize; lay.dims.len()];
    let mut next = 1;
    for (k, (&s, &n)) in scales.iter().zip(hidden).enumerate() {
        if tape.shape(s) != [batch, n] {
            return Err(shape_err(format!("scale {} has shape {:?}, expected [{batch}, {n}]", k + 1, tape.shape(s))));
        }
        parts.push(s);
        table_off[k + 1] = next;
        next += batch * n;
    }
    let table = tape.concat(&parts)?;
    let inv = tape.div(tape.leaf(Tensor::ones(&[next])), table)?;

    let is_hidden = |i: usize| i > 0 && i < lay.dims.len() - 1;
    let slot = |layer: usize, b: usize, unit: usize| {
        if is_hidden(layer) {
            table_off[layer] + b * lay.dims[layer] + unit
        } else {
            0
        }
    };
    let total = batch * lay.per_net;
    let mut row_idx = Vec::with_capacity(total);
    let mut col_idx = Vec::with_capacity(total);
    for b in 0..batch {
        for i in 1..=lay.num_layers() {
            let (rows, cols, inner) = (lay.dims[i], lay.dims[i - 1], lay.windows[i - 1]);
            for r in 0..rows {
                for c in 0..cols {
                    for _ in 0..inner {
                        row_idx.push(slot(i, b, r));
                        col_idx.push(slot(i - 1, b, c));
                    }
                }
            }
            for r in 0..rows {
                row_idx.push(slot(i, b, r));
                col_idx.push(0);
            }
        }
    }
    let up = tape.gather(table, row_idx.into(), &[1, total])?;
    let down = tape.gather(inv, col_idx.into(), &[1, total])?;
    let factor = tape.broadcast_to(tape.mul(up, down)?, &[feat.channels, total])?;
    Ok(feat.with_data(tape.mul(feat.data, factor)?, feat.channels))
}

/// Group-invariant read-out, `[B, c * pooled_per_channel]`.
///
/// Hidden units are canonicalized layer by layer: each hidden row (weights
/// and bias) is divided by its norm and the norm is carried into the
/// matching column of the next layer, which removes every positive scaling.
/// The output layer's columns are then normalized. Averaging over the hidden
/// axes removes the permutations: rows of the first layer, rows and columns
/// of intermediate layers, columns of the last layer.
pub fn invariant_pool_on_tape(tape: &Tape, feat: &WeightFeatureVar) -> Result<Var> {
    let lay = &feat.layout;
    let cb = feat.channels * feat.batch;
    let nl = lay.num_layers();
    let mut pieces: Vec<(Var, usize)> = Vec::new();
    let mut carried: Option<Var> = None;

    for i in 1..=nl {
        let (n, m, w) = (lay.dims[i], lay.dims[i - 1], lay.windows[i - 1]);
        let width = m * w;
        let mut widx = Vec::with_capacity(cb * n * width);
        let mut bidx = Vec::with_capacity(cb * n);
        for g in 0..cb {
            let base = g * lay.per_net;
            widx.extend((0..n * width).map(|j| base + lay.weight_off[i - 1] + j));
            bidx.extend((0..n).map(|r| base + lay.bias_off[i - 1] + r));
        }
        let mut wblk = tape.gather(feat.data, widx.into(), &[cb * n, width])?;
        let bblk = tape.gather(feat.data, bidx.into(), &[cb * n])?;
        if let Some(nu) = carried {
            let idx: Vec<usize> = (0..cb)
                .flat_map(|g| (0..n).flat_map(move |_| (0..m).flat_map(move |c| (0..w).map(move |_| g * m + c))))
                .collect();
            let expanded = tape.gather(nu, idx.into(), &[cb * n, width])?;
            wblk = tape.mul(wblk, expanded)?;
        }

        if i < nl || nl == 1 {
            let sq = tape.add(tape.sum_axis(tape.square(wblk), 1)?, tape.square(bblk))?;
            let nu = tape.sqrt(sq);
            let denom = tape.clamp(nu, NORM_EPS, f64::INFINITY);
            let rep: Vec<usize> = (0..cb * n).flat_map(|r| (0..width).map(move |_| r)).collect();
            let what = tape.div(wblk, tape.gather(denom, rep.into(), &[cb * n, width])?)?;
            let bhat = tape.div(bblk, denom)?;
            let bmean = tape.scale(tape.sum_axis(tape.reshape(bhat, &[cb, n])?, 1)?, 1.0 / n as f64);
            if i == 1 {
                let rows = tape.sum_axis(tape.reshape(what, &[cb, n, width])?, 1)?;
                pieces.push((tape.scale(rows, 1.0 / n as f64), width));
            } else {
                let all = tape.sum_axis(tape.reshape(what, &[cb, n * width])?, 1)?;
                pieces.push((tape.scale(all, 1.0 / (n * width) as f64), 1));
            }
            pieces.push((bmean, 1));
            carried = Some(nu);
        } else {
            // Column norms over (row, window) for each incoming unit.
            let per = tape.reshape(tape.square(wblk), &[cb, n, m, w])?;
            let over_rows = tape.sum_axis(per, 1)?;
            let col_sq = tape.sum_axis(over_rows, 2)?;
            let kappa = tape.clamp(tape.sqrt(col_sq), NORM_EPS, f64::INFINITY);
            let idx: Vec<usize> = (0..cb)
                .flat_map(|g| (0..n).flat_map(move |_| (0..m).flat_map(move |c| (0..w).map(move |_| g * m + c))))
                .collect();
            let normed = tape.div(wblk, tape.gather(kappa, idx.into(), &[cb * n, width])?)?;
            let cols = tape.sum_axis(tape.reshape(normed, &[cb, n, m, w])?, 2)?;
            pieces.push((tape.scale(cols, 1.0 / m as f64), n * w));
            pieces.push((bblk, n));
        }
    }

    // Each piece is laid out as [cb, len]; interleave into
    // [B, c, pooled_per_channel].
    let flat = tape.concat(&pieces.iter().map(|p| p.0).collect::<Vec<_>>())?;
    let per_channel: usize = pieces.iter().map(|p| p.1).sum();
    debug_assert_eq!(per_channel, lay.pooled_per_channel());
    let mut piece_off = Vec::with_capacity(pieces.len());
    let mut acc = 0;
    for p in &pieces {
        piece_off.push(acc);
        acc += cb * p.1;
    }
    let (c, batch) = (feat.channels, feat.batch);
    let mut idx = Vec::with_capacity(cb * per_channel);
    for b in 0..batch {
        for ch in 0..c {
            let g = ch * batch + b;
            for (p, &off) in pieces.iter().zip(&piece_off) {
                idx.extend((0..p.1).map(|j| off + g * p.1 + j));
            }
        }
    }
    tape.gather(flat, idx.into(), &[batch, c * per_channel])
}

/// Plain-value form of [`channel_mix_on_tape`].
pub fn channel_mix(mix: &Tensor, bias: &Tensor, feat: &WeightFeature) -> Result<WeightFeature> {
    let tape = Tape::new();
    let out = channel_mix_on_tape(&tape, tape.leaf(mix.clone()), tape.leaf(bias.clone()), &feat.on_tape(&tape))?;
    Ok(out.value(&tape))
}

pub fn equiv_relu(feat: &WeightFeature) -> WeightFeature {
    WeightFeature { layout: feat.layout.clone(), batch: feat.batch, data: feat.data.map(|v| v.max(0.0)) }
}

/// Plain-value form of [`invariant_pool_on_tape`].
pub fn invariant_pool(feat: &WeightFeature) -> Result<Tensor> {
    let tape = Tape::new();
    let out = invariant_pool_on_tape(&tape, &feat.on_tape(&tape))?;
    Ok(tape.value(out))
}

/// Channel-mixing layer parameters: `mix: [c', c]`, `bias: [c']`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMix {
    pub mix: Tensor,
    pub bias: Tensor,
}

/// Strictly equivariant backbone: channel mixing followed by ReLU, repeated.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivStack {
    pub layers: Vec<ChannelMix>,
}

impl EquivStack {
    /// Xavier-initialized stack taking one input channel to `widths`.
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Self {
        Self::with_input(1, widths, rng)
    }

    /// Stack taking `input` channels to `widths`.
    pub fn with_input(input: usize, widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut prev = input;
        let layers = widths
            .iter()
            .map(|&w| {
                let d = Dense::xavier(prev, w, rng);
                prev = w;
                ChannelMix { mix: d.weight, bias: d.bias }
            })
            .collect();
        Self { layers }
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(1, |l| l.mix.shape()[0])
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.mix.len() + l.bias.len()).sum()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.mix, &mut l.bias]).collect()
    }

    /// Leaves for every parameter, in [`EquivStack::tensors_mut`] order.
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [tape.leaf(l.mix.clone()), tape.leaf(l.bias.clone())]).collect()
    }

    pub fn apply_on_tape(&self, tape: &Tape, vars: &[Var], feat: &WeightFeatureVar) -> Result<WeightFeatureVar> {
        let mut h = feat.clone();
        for pair in vars.chunks(2) {
            h = equiv_relu_on_tape(tape, &channel_mix_on_tape(tape, pair[0], pair[1], &h)?);
        }
        Ok(h)
    }

    pub fn apply(&self, feat: &WeightFeature) -> Result<WeightFeature> {
        let mut h = feat.clone();
        for l in &self.layers {
            h = equiv_relu(&channel_mix(&l.mix, &l.bias, &h)?);
        }
        Ok(h)
    }
}

/// Head products `A_i = W^Q_i (W^K_i)^T` and `B_i = W^V_i (W^O_i)^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaInvariantFeature {
    pub a: Vec<Tensor>,
    pub b: Vec<Tensor>,
}

pub fn mha_invariants(params: &MhaBlockParams) -> MhaInvariantFeature {
    let prod = |x: &Tensor, y: &Tensor| x.matmul(&y.transpose().expect("matrix")).expect("same width");
    MhaInvariantFeature {
        a: params.heads().iter().map(|h| prod(&h.query, &h.key)).collect(),
        b: params.heads().iter().map(|h| prod(&h.value, &h.output)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadPool {
    Sum,
    Mean,
}

/// Flattened `sum_i A_i` followed by `sum_i B_i` (or the means).
pub fn head_pool(inv: &MhaInvariantFeature, mode: HeadPool) -> Result<Tensor> {
    let (Some(a0), Some(b0)) = (inv.a.first(), inv.b.first()) else {
        return Err(Error::InvalidArgument("head pooling needs at least one head".into()));
    };
    let mut a = a0.clone();
    for t in &inv.a[1..] {
        a = a.add(t)?;
    }
    let mut b = b0.clone();
    for t in &inv.b[1..] {
        b = b.add(t)?;
    }
    if mode == HeadPool::Mean {
        a = a.scale(1.0 / inv.a.len() as f64);
        b = b.scale(1.0 / inv.b.len() as f64);
    }
    let mut out = a.into_data();
    out.extend(b.into_data());
    let n = out.len();
    Ok(Tensor::from_parts(vec![n], out))
}

/// Tape form of `head_pool(mha_invariants(.), mode)` over per-head
/// projections `[q, k, v, o]`.
pub fn mha_pool_on_tape(tape: &Tape, heads: &[[Var; 4]], mode: HeadPool) -> Result<Var> {
    if heads.is_empty() {
        return Err(Error::InvalidArgument("head pooling needs at least one head".into()));
    }
    let mut a_sum: Option<Var> = None;
    let mut b_sum: Option<Var> = None;
    for [q, k, v, o] in heads {
        let a = tape.matmul(*q, tape.transpose(*k)?)?;
        let b = tape.matmul(*v, tape.transpose(*o)?)?;
        a_sum = Some(match a_sum {
            None => a,
            Some(s) => tape.add(s, a)?,
        });
        b_sum = Some(match b_sum {
            None => b,
            Some(s) => tape.add(s, b)?,
        });
    }
    let out = tape.concat(&[a_sum.expect("non-empty"), b_sum.expect("non-empty")])?;
    Ok(match mode {
        HeadPool::Sum => out,
        HeadPool::Mean => tape.scale(out, 1.0 / heads.len() as f64),
    })
}
