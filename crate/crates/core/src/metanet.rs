//! Invariant metanetworks: lift θ to a weight feature, run the equivariant
//! stack (with the quasi layer in place of its last scaling), pool to a
//! group-invariant vector and regress the label with a dense head.
//!
//! Attention blocks take a different route: the heads pass through the
//! optional GL quasi layer and are pooled into head-permutation and GL
//! invariants, while the feedforward sublayer goes through the monomial
//! pipeline like any two-layer MLP.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::equivlayers::{invariant_pool_on_tape, lift, mha_pool_on_tape, EquivStack, FeatureLayout, HeadPool};
use crate::error::{Error, Result};
use crate::netmodels::{Arch, DenseLayer, Envelope, MlpParams, NetParams, FORMAT_VERSION};
use crate::numcore::{bce_on_tape, kendall_tau, mse_on_tape, AdamState, Dense, DenseVars, Tape, Tensor, Var};
use crate::quasilayers::{quasi_heads_on_tape, quasi_scale_on_tape, GlNet, ScaleNet, SCALE_EPS_MAX};
use crate::statfeat::{stat_features, STATS_PER_TENSOR};

/// Architecture and dims of the networks a metanetwork reads.
pub type Signature = (Arch, Vec<usize>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetanetConfig {
    pub arch: Arch,
    /// Output channels of each equivariant layer.
    pub channels: Vec<usize>,
    pub quasi: bool,
    /// Fixes every ε at this value instead of learning it.
    #[serde(default)]
    pub frozen_eps: Option<f64>,
    /// Hidden widths of the dense head.
    pub head: Vec<usize>,
    pub loss: LossKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for MetanetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MetanetConfig {
    /// Small widths that train in seconds on one core.
    pub fn desk() -> Self {
        Self {
            arch: Arch::Mlp,
            channels: vec![8, 8, 4],
            quasi: true,
            frozen_eps: None,
            head: vec![64],
            loss: LossKind::Bce,
            lr: 1e-3,
            batch_size: 8,
            epochs: 50,
            seed: 0,
        }
    }

    /// Reference widths: channels 16, 16, 5 and three 200-wide head layers.
    pub fn reference() -> Self {
        Self { channels: vec![16, 16, 5], head: vec![200, 200, 200], ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.arch != Arch::Mha && self.channels.is_empty() {
            return bad("at least one equivariant layer is required".into());
        }
        if self.channels.iter().chain(&self.head).any(|&w| w == 0) {
            return bad(format!("zero width in channels {:?} or head {:?}", self.channels, self.head));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size 0".into());
        }
        if let Some(e) = self.frozen_eps {
            if !(0.0..=SCALE_EPS_MAX).contains(&e) {
                return bad(format!("frozen ε {e} outside [0, {SCALE_EPS_MAX}]"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::netmodels::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Test-set style summary of a model on labelled networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub tau: f64,
    pub loss: f64,
    /// Agreement of `pred > 0.5` with `label > 0.5`, BCE models only.
    pub accuracy: Option<f64>,
    pub n: usize,
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub split: String,
    pub tau: f64,
    pub loss: f64,
    pub n: usize,
}

pub fn write_metrics_csv<W: std::io::Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub const METRICS_HEADER: [&str; 5] = ["seed", "split", "tau", "loss", "n"];

fn malformed(e: csv::Error) -> Error {
    Error::Malformed(e.to_string())
}

/// Rows of a metrics CSV, or `None` when the header is not [`METRICS_HEADER`].
pub fn read_metrics_csv<R: std::io::Read>(input: R) -> Result<Option<Vec<MetricsRow>>> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers().map_err(malformed)?.iter().ne(METRICS_HEADER) {
        return Ok(None);
    }
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>().map_err(malformed)?;
    Ok(Some(rows))
}

/// Per-epoch losses as `epoch,loss` rows.
pub fn write_history_csv<W: std::io::Write>(history: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["epoch", "loss"]).map_err(io)?;
    for (i, l) in history.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()]).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history_csv<R: std::io::Read>(input: R) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(malformed)?;
        let field = rec.get(1).ok_or_else(|| Error::Malformed("history row without a loss".into()))?;
        out.push(field.parse().map_err(|_| Error::Malformed(format!("loss `{field}`")))?);
    }
    Ok(out)
}

/// Indices of entries whose label is at least `min`.
pub fn threshold_indices(labels: &[f64], min: f64) -> Vec<usize> {
    labels.iter().enumerate().filter(|(_, &l)| l >= min).map(|(i, _)| i).collect()
}

/// A metanetwork with its learned tensors and per-epoch training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Metanet {
    config: MetanetConfig,
    signature: Signature,
    layout: Option<FeatureLayout>,
    stack: Option<EquivStack>,
    scale: Option<ScaleNet>,
    gl: Option<GlNet>,
    head: Vec<Dense>,
    pub history: Vec<f64>,
}

fn monomial_layout(sig: &Signature) -> Result<Option<FeatureLayout>> {
    let (arch, dims) = sig;
    let bad = || Error::Architecture(format!("{} dims {dims:?}", arch.name()));
    Ok(match arch {
        Arch::Mlp => {
            if dims.len() < 2 {
                return Err(bad());
            }
            Some(FeatureLayout::new(dims.clone(), vec![1; dims.len() - 1])?)
        }
        Arch::Conv1d => {
            if dims.len() < 3 || dims.len() % 2 == 0 {
                return Err(bad());
            }
            let l = dims.len() / 2;
            Some(FeatureLayout::new(dims[..=l].to_vec(), dims[l + 1..].to_vec())?)
        }
        Arch::Mha => match dims[..] {
            [d, _, _, f] => Some(FeatureLayout::new(vec![d, f, d], vec![1, 1])?),
            [_, _, _] => None,
            _ => return Err(bad()),
        },
    })
}

fn stat_len_for(sig: &Signature) -> usize {
    match sig.0 {
        Arch::Mlp => 2 * STATS_PER_TENSOR * (sig.1.len() - 1),
        Arch::Conv1d => 2 * STATS_PER_TENSOR * (sig.1.len() / 2),
        Arch::Mha => STATS_PER_TENSOR * if sig.1.len() == 4 { 8 } else { 4 },
    }
}

/// The feedforward sublayer of an attention block as a two-layer MLP.
fn feedforward_mlp(p: &NetParams) -> Result<Option<NetParams>> {
    let Some(ff) = p.as_mha().and_then(|m| m.feedforward()) else {
        return Ok(None);
    };
    let layers = vec![
        DenseLayer { weight: ff.w_a.clone(), bias: ff.b_a.clone() },
        DenseLayer { weight: ff.w_b.clone(), bias: ff.b_b.clone() },
    ];
    Ok(Some(MlpParams::new(layers)?.into()))
}

fn stats_leaf(tape: &Tape, batch: &[&NetParams], len: usize) -> Var {
    let mut data = Vec::with_capacity(batch.len() * len);
    for p in batch {
        data.extend_from_slice(stat_features(p).data());
    }
    tape.leaf(Tensor::from_parts(vec![batch.len(), len], data))
}

impl Metanet {
    /// Deterministic initialization from `config.seed`. The backbone and head
    /// draw from one random stream and the quasi nets from another, so
    /// models that differ only in `quasi` share their backbone.
    pub fn build(config: MetanetConfig, signature: Signature) -> Result<Self> {
        config.validate()?;
        if config.arch != signature.0 {
            return Err(Error::Architecture(format!(
                "config targets {} but the zoo holds {}",
                config.arch.name(),
                signature.0.name()
            )));
        }
        let layout = monomial_layout(&signature)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let stack = layout.as_ref().map(|_| EquivStack::new(&config.channels, &mut rng));

        let mut head_in = match (&layout, &stack) {
            (Some(l), Some(s)) => s.out_channels() * l.pooled_per_channel(),
            _ => 0,
        };
        if signature.0 == Arch::Mha {
            head_in += 2 * signature.1[0] * signature.1[0];
        }
        let mut head = Vec::with_capacity(config.head.len() + 1);
        let mut prev = head_in;
        for &w in config.head.iter().chain(&[1]) {
            head.push(Dense::xavier(prev, w, &mut rng));
            prev = w;
        }

        let mut qrng = ChaCha8Rng::seed_from_u64(config.seed);
        qrng.set_stream(1);
        let stat_len = stat_len_for(&signature);
        let (mut scale, mut gl) = (None, None);
        if config.quasi {
            let dims = &signature.1;
            match signature.0 {
                Arch::Mha => gl = Some(GlNet::new(stat_len, dims[2], dims[1], &mut qrng)),
                _ => {
                    let l = layout.as_ref().expect("monomial layout");
                    let hidden = &l.dims()[1..l.dims().len() - 1];
                    scale = Some(ScaleNet::new(stat_len, hidden, &mut qrng));
                }
            }
            if let Some(e) = config.frozen_eps {
                if let Some(s) = scale.as_mut() {
                    s.freeze_eps(e);
                }
                if let Some(g) = gl.as_mut() {
                    g.freeze_eps(e.min(GlNet::eps_bound(dims[1])));
                }
            }
        }
        Ok(Self { config, signature, layout, stack, scale, gl, head, history: Vec::new() })
    }

    pub fn config(&self) -> &MetanetConfig {
        &self.config
    }

    pub fn signature(&self) -> &Signature {
        &self.signature
    }

    pub fn scale_net(&self) -> Option<&ScaleNet> {
        self.scale.as_ref()
    }

    pub fn gl_net(&self) -> Option<&GlNet> {
        self.gl.as_ref()
    }

    pub fn has_quasi(&self) -> bool {
        self.scale.is_some() || self.gl.is_some()
    }

    pub fn num_params(&self) -> usize {
        self.stack.as_ref().map_or(0, EquivStack::num_params)
            + self.scale.as_ref().map_or(0, ScaleNet::num_params)
            + self.gl.as_ref().map_or(0, GlNet::num_params)
            + self.head.iter().map(Dense::num_params).sum::<usize>()
    }

    /// Trainable tensors: equivariant stack, quasi net, head.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(s) = self.stack.as_mut() {
            out.extend(s.tensors_mut());
        }
        if let Some(s) = self.scale.as_mut() {
            out.extend(s.tensors_mut());
        }
        if let Some(g) = self.gl.as_mut() {
            out.extend(g.tensors_mut());
        }
        for d in &mut self.head {
            out.extend(d.tensors_mut());
        }
        out
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.clone().tensors_mut().into_iter().map(|t| t.clone()).collect()
    }

    fn set_tensors(&mut self, values: Vec<Tensor>) {
        for (slot, v) in self.tensors_mut().into_iter().zip(values) {
            *slot = v;
        }
        if let Some(s) = self.scale.as_mut() {
            s.project();
        }
        if let Some(g) = self.gl.as_mut() {
            g.project();
        }
    }

    /// Names of [`Metanet::tensors_mut`], used in checkpoints.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(s) = &self.stack {
            for i in 1..=s.layers.len() {
                out.extend([format!("stack{i}.mix"), format!("stack{i}.bias")]);
            }
        }
        let gated = |prefix: &str| {
            ["inner.weight", "inner.bias", "outer.weight", "outer.bias"].map(|n| format!("{prefix}.{n}"))
        };
        if let Some(s) = &self.scale {
            for i in 1..=s.nets().len() {
                out.extend(gated(&format!("scale{i}")));
                if s.learns_eps() {
                    out.push(format!("scale{i}.eps"));
                }
            }
        }
        if let Some(g) = &self.gl {
            out.extend(gated("gl"));
            if g.learns_eps() {
                out.push("gl.eps".into());
            }
        }
        for i in 1..=self.head.len() {
            out.extend([format!("head{i}.weight"), format!("head{i}.bias")]);
        }
        out
    }

    /// Records every trainable tensor as a leaf, in [`Metanet::tensors_mut`]
    /// order.
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.tensors().into_iter().map(|t| tape.leaf(t)).collect()
    }

    fn check_batch(&self, batch: &[&NetParams]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for p in batch {
            if p.signature() != self.signature {
                return Err(Error::Architecture(format!(
                    "model reads {} {:?}, got {} {:?}",
                    self.signature.0.name(),
                    self.signature.1,
                    p.arch().name(),
                    p.dims()
                )));
            }
        }
        Ok(())
    }

    /// Predictions `[B]` for a batch, using `vars` from [`Metanet::bind`].
    pub fn forward_on_tape(&self, tape: &Tape, vars: &[Var], batch: &[&NetParams]) -> Result<Var> {
        self.check_batch(batch)?;
        let n_stack = self.stack.as_ref().map_or(0, |s| 2 * s.layers.len());
        let n_quasi = self.scale.as_ref().map_or(0, |s| s.nets().len() * (4 + usize::from(s.learns_eps())))
            + self.gl.as_ref().map_or(0, |g| 4 + usize::from(g.learns_eps()));
        if vars.len() != n_stack + n_quasi + 2 * self.head.len() {
            return Err(Error::InvalidArgument(format!("{} variables for this model", vars.len())));
        }
        let (stack_vars, rest) = vars.split_at(n_stack);
        let (quasi_vars, head_vars) = rest.split_at(n_quasi);
        let bsz = batch.len();
        let stat_len = stat_len_for(&self.signature);

        let features = if self.signature.0 == Arch::Mha {
            self.mha_features(tape, stack_vars, quasi_vars, batch, stat_len)?
        } else {
            let stack = self.stack.as_ref().expect("monomial stack");
            let feat = lift(batch)?.on_tape(tape);
            let mut h = stack.apply_on_tape(tape, stack_vars, &feat)?;
            if let Some(s) = &self.scale {
                let sv = s.bind_from(tape, quasi_vars)?;
                h = quasi_scale_on_tape(tape, &sv, stats_leaf(tape, batch, stat_len), &h)?;
            }
            invariant_pool_on_tape(tape, &h)?
        };

        let mut x = features;
        for (k, pair) in head_vars.chunks(2).enumerate() {
            x = DenseVars { weight: pair[0], bias: pair[1] }.apply(tape, x)?;
            if k + 1 < self.head.len() {
                x = tape.relu(x);
            }
        }
        let x = tape.reshape(x, &[bsz])?;
        Ok(match self.config.loss {
            LossKind::Bce => tape.sigmoid(x),
            LossKind::Mse => x,
        })
    }

    fn mha_features(
        &self,
        tape: &Tape,
        stack_vars: &[Var],
        quasi_vars: &[Var],
        batch: &[&NetParams],
        stat_len: usize,
    ) -> Result<Var> {
        let factors = match &self.gl {
            Some(g) => Some(g.bind_from(tape, quasi_vars)?.factors(tape, stats_leaf(tape, batch, stat_len))?),
            None => None,
        };
        let mut rows = Vec::with_capacity(batch.len());
        let mut width = 0;
        for (b, p) in batch.iter().enumerate() {
            let m = p.as_mha().expect("checked signature");
            let mut heads: Vec<[Var; 4]> =
                m.heads().iter().map(|h| [0, 1, 2, 3].map(|r| tape.leaf(h.get(r).clone()))).collect();
            if let Some(f) = &factors {
                heads = quasi_heads_on_tape(tape, &heads, &f[b])?;
            }
            let mut parts = vec![mha_pool_on_tape(tape, &heads, HeadPool::Mean)?];
            if let (Some(stack), Some(ff)) = (&self.stack, feedforward_mlp(p)?) {
                let feat = lift(&[&ff])?.on_tape(tape);
                let h = stack.apply_on_tape(tape, stack_vars, &feat)?;
                parts.push(invariant_pool_on_tape(tape, &h)?);
            }
            let row = tape.concat(&parts)?;
            width = tape.shape(row)[0];
            rows.push(row);
        }
        tape.reshape(tape.concat(&rows)?, &[batch.len(), width])
    }

    /// Mean training loss of a batch.
    pub fn loss_on_tape(&self, tape: &Tape, vars: &[Var], batch: &[&NetParams], labels: &[f64]) -> Result<Var> {
        let pred = self.forward_on_tape(tape, vars, batch)?;
        let target = Tensor::vector(labels.to_vec())?;
        match self.config.loss {
            LossKind::Bce => bce_on_tape(tape, pred, &target),
            LossKind::Mse => mse_on_tape(tape, pred, &target),
        }
    }

    pub fn predict(&self, params: &[&NetParams]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(params.len());
        for chunk in params.chunks(64) {
            let tape = Tape::new();
            let vars = self.bind(&tape);
            let pred = self.forward_on_tape(&tape, &vars, chunk)?;
            out.extend_from_slice(tape.value(pred).data());
        }
        Ok(out)
    }

    pub fn predict_one(&self, params: &NetParams) -> Result<f64> {
        Ok(self.predict(&[params])?[0])
    }

    fn check_labels(&self, params: &[&NetParams], labels: &[f64]) -> Result<()> {
        if params.is_empty() {
            return Err(Error::InvalidArgument("empty zoo".into()));
        }
        if params.len() != labels.len() {
            return Err(Error::InvalidArgument(format!("{} networks but {} labels", params.len(), labels.len())));
        }
        let ok = |l: f64| match self.config.loss {
            LossKind::Bce => (0.0..=1.0).contains(&l),
            LossKind::Mse => l.is_finite(),
        };
        if let Some(l) = labels.iter().find(|&&l| !ok(l)) {
            return Err(Error::InvalidArgument(format!("label {l} is not valid for {:?} loss", self.config.loss)));
        }
        Ok(())
    }

    /// Adam over shuffled mini-batches for `config.epochs` epochs. Returns
    /// the mean loss of each epoch, which is also appended to `history`.
    pub fn train(&mut self, params: &[&NetParams], labels: &[f64]) -> Result<Vec<f64>> {
        self.check_labels(params, labels)?;
        self.check_batch(params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(2);
        let mut adam = AdamState::new(self.config.lr, &self.tensors());
        let mut order: Vec<usize> = (0..params.len()).collect();
        let mut epochs = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&NetParams> = chunk.iter().map(|&i| params[i]).collect();
                let ys: Vec<f64> = chunk.iter().map(|&i| labels[i]).collect();
                let tape = Tape::new();
                let vars = self.bind(&tape);
                let loss = self.loss_on_tape(&tape, &vars, &batch, &ys)?;
                let value = tape.item(loss)?;
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("training loss became {value} in epoch {}", epoch + 1)));
                }
                let grads = tape.backward(loss)?;
                let g: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
                let mut current = self.tensors();
                adam.step(&mut current, &g)?;
                self.set_tensors(current);
                total += value * chunk.len() as f64;
            }
            epochs.push(total / params.len() as f64);
        }
        self.history.extend_from_slice(&epochs);
        Ok(epochs)
    }

    pub fn evaluate(&self, params: &[&NetParams], labels: &[f64]) -> Result<EvalMetrics> {
        self.check_labels(params, labels)?;
        let pred = self.predict(params)?;
        let loss = match self.config.loss {
            LossKind::Bce => crate::numcore::bce_loss(&pred, labels)?,
            LossKind::Mse => crate::numcore::mse_loss(&pred, labels)?,
        };
        let accuracy = (self.config.loss == LossKind::Bce).then(|| {
            let hits = pred.iter().zip(labels).filter(|(p, l)| (**p > 0.5) == (**l > 0.5)).count();
            hits as f64 / labels.len() as f64
        });
        Ok(EvalMetrics { tau: kendall_tau(&pred, labels)?.tau, loss, accuracy, n: labels.len() })
    }

    pub fn to_json(&self) -> String {
        let mut weights =
            Envelope::new(Some(self.signature.0.name()), Some("metanet_weights"), self.signature.1.clone());
        for (name, t) in self.param_names().into_iter().zip(self.tensors()) {
            weights.put(name, &t);
        }
        let doc = CheckpointDoc {
            version: FORMAT_VERSION.into(),
            kind: "metanet".into(),
            config: self.config.clone(),
            arch: self.signature.0,
            dims: self.signature.1.clone(),
            history: self.history.clone(),
            weights,
        };
        serde_json::to_string(&doc).expect("checkpoint serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_slice(bytes).map_err(|e| Error::Malformed(e.to_string()))?;
        if doc.version != FORMAT_VERSION {
            return Err(Error::Version { found: doc.version, expected: FORMAT_VERSION.into() });
        }
        if doc.kind != "metanet" {
            return Err(Error::Malformed(format!("expected a metanet checkpoint, found `{}`", doc.kind)));
        }
        doc.weights.check_version()?;
        let mut model = Self::build(doc.config, (doc.arch, doc.dims)).map_err(|e| Error::Malformed(e.to_string()))?;
        let names = model.param_names();
        if names.len() != doc.weights.tensors.len() {
            return Err(Error::Malformed(format!(
                "checkpoint has {} tensors, model uses {}",
                doc.weights.tensors.len(),
                names.len()
            )));
        }
        let current = model.tensors();
        let mut values = Vec::with_capacity(names.len());
        for (name, cur) in names.iter().zip(&current) {
            let t = doc.weights.tensor(name)?;
            if t.shape() != cur.shape() {
                return Err(Error::Malformed(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    cur.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Malformed(format!("tensor `{name}` is not finite")));
            }
            values.push(t);
        }
        model.set_tensors(values);
        model.history = doc.history;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    version: String,
    kind: String,
    config: MetanetConfig,
    arch: Arch,
    dims: Vec<usize>,
    history: Vec<f64>,
    weights: Envelope,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodels::{Conv1dParams, MhaBlockParams};
    use crate::numcore::grad_compare_many;
    use crate::propverify::sample_gl_conditioned;
    use crate::symmetry::{sample_monomial, GroupElement};
    use rand::Rng;

    const MLP_DIMS: [usize; 4] = [2, 8, 8, 2];

    fn mlp_sig() -> Signature {
        (Arch::Mlp, MLP_DIMS.to_vec())
    }

    fn mlps(n: usize, seed: u64) -> Vec<NetParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| MlpParams::random(&MLP_DIMS, rng.random_range(0.3..1.5), &mut rng).unwrap().into()).collect()
    }

    fn refs(v: &[NetParams]) -> Vec<&NetParams> {
        v.iter().collect()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn config(arch: Arch) -> MetanetConfig {
        MetanetConfig { arch, ..MetanetConfig::desk() }
    }

    #[test]
    fn initialization_is_deterministic() {
        let a = Metanet::build(config(Arch::Mlp), mlp_sig()).unwrap();
        let b = Metanet::build(config(Arch::Mlp), mlp_sig()).unwrap();
        assert_eq!(a, b);
        let c = Metanet::build(MetanetConfig { seed: 1, ..config(Arch::Mlp) }, mlp_sig()).unwrap();
        assert_ne!(a.tensors(), c.tensors());
    }

    #[test]
    fn disabled_quasi_has_no_quasi_tensors() {
        let off = Metanet::build(MetanetConfig { quasi: false, ..config(Arch::Mlp) }, mlp_sig()).unwrap();
        assert!(!off.has_quasi() && off.scale_net().is_none() && off.gl_net().is_none());
        assert!(off.param_names().iter().all(|n| !n.starts_with("scale") && !n.starts_with("gl")));
        let mha = (Arch::Mha, vec![8, 4, 2, 8]);
        let off = Metanet::build(MetanetConfig { quasi: false, ..config(Arch::Mha) }, mha.clone()).unwrap();
        assert!(off.gl_net().is_none());
        assert!(Metanet::build(config(Arch::Mha), mha).unwrap().gl_net().is_some());
    }

    #[test]
    fn quasi_parameter_overhead_is_small_at_reference_widths() {
        let on = Metanet::build(MetanetConfig::reference(), mlp_sig()).unwrap();
        let off = Metanet::build(MetanetConfig { quasi: false, ..MetanetConfig::reference() }, mlp_sig()).unwrap();
        let extra = (on.num_params() - off.num_params()) as f64 / off.num_params() as f64;
        assert!(extra > 0.0 && extra < 0.10, "overhead {extra}");
        assert_eq!(on.tensors().iter().map(Tensor::len).sum::<usize>(), on.num_params());
    }

    #[test]
    fn config_validation() {
        let bad = [
            MetanetConfig { channels: vec![], ..config(Arch::Mlp) },
            MetanetConfig { head: vec![0], ..config(Arch::Mlp) },
            MetanetConfig { lr: -1.0, ..config(Arch::Mlp) },
            MetanetConfig { lr: f64::NAN, ..config(Arch::Mlp) },
            MetanetConfig { batch_size: 0, ..config(Arch::Mlp) },
            MetanetConfig { frozen_eps: Some(-0.1), ..config(Arch::Mlp) },
        ];
        for c in bad {
            assert!(matches!(Metanet::build(c, mlp_sig()), Err(Error::InvalidArgument(_))));
        }
        assert!(matches!(Metanet::build(config(Arch::Conv1d), mlp_sig()), Err(Error::Architecture(_))));
        assert!(matches!(Metanet::build(config(Arch::Mlp), (Arch::Mlp, vec![3])), Err(Error::Architecture(_))));
        assert_ne!(config(Arch::Mlp).hash(), MetanetConfig { seed: 9, ..config(Arch::Mlp) }.hash());
    }

    #[test]
    fn predictions_are_monomial_invariant_on_mlps() {
        let model = Metanet::build(config(Arch::Mlp), mlp_sig()).unwrap();
        let nets = mlps(6, 1);
        let base = model.predict(&refs(&nets)).unwrap();
        assert!(base.iter().all(|&p| p > 0.0 && p < 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for high in [1.0, 10.0, 1e3] {
            let moved: Vec<NetParams> = nets
                .iter()
                .map(|p| {
                    GroupElement::from(sample_monomial(&MLP_DIMS, 1.0, high, true, &mut rng).unwrap()).act(p).unwrap()
                })
                .collect();
            let d = max_diff(&base, &model.predict(&refs(&moved)).unwrap());
            assert!(d < 1e-9, "scale {high}: {d}");
        }
    }

    #[test]
    fn predictions_are_monomial_invariant_on_convs() {
        let (channels, windows) = ([2, 5, 4, 1], [3, 2, 2]);
        let sig = (Arch::Conv1d, channels.iter().chain(&windows).copied().collect());
        let model = Metanet::build(config(Arch::Conv1d), sig).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nets: Vec<NetParams> =
            (0..4).map(|_| Conv1dParams::random(&channels, &windows, 1.0, &mut rng).unwrap().into()).collect();
        let base = model.predict(&refs(&nets)).unwrap();
        let moved: Vec<NetParams> = nets
            .iter()
            .map(|p| GroupElement::from(sample_monomial(&channels, 1.0, 1e3, true, &mut rng).unwrap()).act(p).unwrap())
            .collect();
        let d = max_diff(&base, &model.predict(&refs(&moved)).unwrap());
        assert!(d < 1e-9, "{d}");
    }

    #[test]
    fn predictions_are_gl_invariant_on_attention() {
        let sig = (Arch::Mha, vec![8, 4, 2, 8]);
        let model = Metanet::build(config(Arch::Mha), sig).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let nets: Vec<NetParams> =
            (0..4).map(|_| MhaBlockParams::random(8, 4, 2, Some(8), 1.0, &mut rng).unwrap().into()).collect();
        let base = model.predict(&refs(&nets)).unwrap();
        let moved: Vec<NetParams> = nets
            .iter()
            .map(|p| GroupElement::from(sample_gl_conditioned(2, 4, 1.0, 20.0, &mut rng).unwrap()).act(p).unwrap())
            .collect();
        let d = max_diff(&base, &model.predict(&refs(&moved)).unwrap());
        assert!(d < 1e-9, "{d}");
    }

    #[test]
    fn duplicates_in_a_batch_predict_identically() {
        let model = Metanet::build(config(Arch::Mlp), mlp_sig()).unwrap();
        let nets = mlps(2, 5);
        let p = model.predict(&[&nets[0], &nets[1], &nets[0]]).unwrap();
        assert_eq!(p[0], p[2]);
        assert!((model.predict_one(&nets[0]).unwrap() - p[0]).abs() < 1e-12);
    }

    #[test]
    fn zero_eps_quasi_matches_plain_model() {
        let on = Metanet::build(MetanetConfig { frozen_eps: Some(0.0), ..config(Arch::Mlp) }, mlp_sig()).unwrap();
        let off = Metanet::build(MetanetConfig { quasi: false, ..config(Arch::Mlp) }, mlp_sig()).unwrap();
        assert!(on.has_quasi());
        let nets = mlps(8, 6);
        let d = max_diff(&on.predict(&refs(&nets)).unwrap(), &off.predict(&refs(&nets)).unwrap());
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn zero_learning_rate_leaves_tensors_unchanged() {
        let mut model = Metanet::build(MetanetConfig { lr: 0.0, epochs: 2, ..config(Arch::Mlp) }, mlp_sig()).unwrap();
        let before = model.tensors();
        let nets = mlps(12, 7);
        let labels: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
        let losses = model.train(&refs(&nets), &labels).unwrap();
        assert_eq!(losses.len(), 2);
        assert_eq!(model.tensors(), before);
    }

    /// Networks at two well separated weight scales, labelled by scale.
    fn separable_zoo(n: usize, seed: u64) -> (Vec<NetParams>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nets = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let big = i % 2 == 1;
            let scale = if big { 2.0 } else { 0.4 };
            nets.push(MlpParams::random(&MLP_DIMS, scale, &mut rng).unwrap().into());
            labels.push(if big { 1.0 } else { 0.0 });
        }
        (nets, labels)
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let (nets, labels) = separable_zoo(200, 8);
        let cfg = MetanetConfig { epochs: 50, ..config(Arch::Mlp) };
        let mut a = Metanet::build(cfg.clone(), mlp_sig()).unwrap();
        let losses = a.train(&refs(&nets), &labels).unwrap();
        assert_eq!(losses.len(), 50);
        assert!(losses[49] <= 0.5 * losses[0], "{} -> {}", losses[0], losses[49]);
        assert_eq!(a.history, losses);

        let mut b = Metanet::build(cfg, mlp_sig()).unwrap();
        b.train(&refs(&nets), &labels).unwrap();
        assert_eq!(a, b);

        let m = a.evaluate(&refs(&nets), &labels).unwrap();
        assert_eq!(m.n, 200);
        assert!(m.accuracy.unwrap() > 0.9);
    }

    #[test]
    fn evaluation_tau_extremes_and_augmentation() {
        let model = Metanet::build(config(Arch::Mlp), mlp_sig()).unwrap();
        let nets = mlps(10, 9);
        let exact = model.predict(&refs(&nets)).unwrap();
        let m = model.evaluate(&refs(&nets), &exact).unwrap();
        assert!((m.tau - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let labels: Vec<f64> = (0..10).map(|_| rng.random()).collect();
        let moved: Vec<NetParams> = nets
            .iter()
            .map(|p| GroupElement::from(sample_monomial(&MLP_DIMS, 1.0, 10.0, true, &mut rng).unwrap()).act(p).unwrap())
            .collect();
        let t0 = model.evaluate(&refs(&nets), &labels).unwrap().tau;
        let t1 = model.evaluate(&refs(&moved), &labels).unwrap().tau;
        assert!((t0 - t1).abs() < 1e-9);

        let mut constant = model.clone();
        let last = constant.head.last_mut().unwrap();
        for t in last.tensors_mut().into_iter().take(1) {
            *t = Tensor::zeros(t.shape());
        }
        let m = constant.evaluate(&refs(&nets), &labels).unwrap();
        assert_eq!(m.tau, 0.0);
    }

    #[test]
    fn label_and_batch_errors() {
        let mut model = Metanet::build(config(Arch::Mlp), mlp_sig()).unwrap();
        let nets = mlps(3, 11);
        assert!(matches!(model.train(&refs(&nets), &[0.5, 0.5]), Err(Error::InvalidArgument(_))));
        assert!(matches!(model.train(&refs(&nets), &[0.5, 1.5, 0.0]), Err(Error::InvalidArgument(_))));
        assert!(model.predict(&[]).unwrap().is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let other: NetParams = MlpParams::random(&[2, 4, 2], 1.0, &mut rng).unwrap().into();
        assert!(matches!(model.predict_one(&other), Err(Error::Architecture(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = Metanet::build(MetanetConfig { frozen_eps: None, ..config(Arch::Mlp) }, mlp_sig()).unwrap();
        let nets = mlps(4, 12);
        let batch = refs(&nets);
        let labels = [0.2, 0.9, 0.5, 0.7];
        let cmp =
            grad_compare_many(|tape, vars| model.loss_on_tape(tape, vars, &batch, &labels), &model.tensors(), 1e-5)
                .unwrap();
        let noise = 1e-9 * cmp.value.abs().max(1.0);
        let names = model.param_names();
        let mut resolved = vec![false; names.len()];
        for e in &cmp.entries {
            if e.analytic.abs().max(e.numeric.abs()) > 1e3 * noise {
                resolved[e.tensor] = true;
                assert!(e.rel_error() < 1e-5, "{}: {e:?}", names[e.tensor]);
            } else {
                assert!((e.analytic - e.numeric).abs() < 1e3 * noise, "{}: {e:?}", names[e.tensor]);
            }
        }
        for (name, r) in names.iter().zip(resolved) {
            assert!(r || name.starts_with("scale"), "{name} has no measurable gradient");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_rejection() {
        let (nets, labels) = separable_zoo(16, 13);
        let mut model = Metanet::build(MetanetConfig { epochs: 2, ..config(Arch::Mlp) }, mlp_sig()).unwrap();
        model.train(&refs(&nets), &labels).unwrap();
        let back = Metanet::from_json(model.to_json().as_bytes()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.predict(&refs(&nets)).unwrap(), model.predict(&refs(&nets)).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        assert_eq!(Metanet::load(&path).unwrap(), model);

        let mut doc: serde_json::Value = serde_json::from_str(&model.to_json()).unwrap();
        doc["version"] = "0.0".into();
        assert!(matches!(Metanet::from_json(doc.to_string().as_bytes()), Err(Error::Version { .. })));
        let mut doc: serde_json::Value = serde_json::from_str(&model.to_json()).unwrap();
        doc["dims"] = serde_json::json!([2, 4, 2]);
        assert!(matches!(Metanet::from_json(doc.to_string().as_bytes()), Err(Error::Malformed(_))));
        assert!(matches!(Metanet::from_json(b"{"), Err(Error::Malformed(_))));
    }

    #[test]
    fn metrics_csv_and_threshold() {
        let rows = [MetricsRow { seed: 1, split: "test".into(), tau: 0.5, loss: 0.25, n: 10 }];
        let mut out = Vec::new();
        write_metrics_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), "seed,split,tau,loss,n");
        assert_eq!(text.lines().nth(1).unwrap(), "1,test,0.5,0.25,10");
        assert_eq!(threshold_indices(&[0.2, 0.6, 0.5, 0.9], 0.5), vec![1, 2, 3]);
        assert_eq!(read_metrics_csv(text.as_bytes()).unwrap().unwrap(), rows);
        assert_eq!(read_metrics_csv(&b"a,b\n1,2\n"[..]).unwrap(), None);
        assert!(matches!(read_metrics_csv(&b"seed,split,tau,loss,n\nx,test,1,1,1\n"[..]), Err(Error::Malformed(_))));

        let mut out = Vec::new();
        write_history_csv(&[0.5, 0.25], &mut out).unwrap();
        assert_eq!(String::from_utf8(out.clone()).unwrap(), "epoch,loss\n1,0.5\n2,0.25\n");
        assert_eq!(read_history_csv(&out[..]).unwrap(), vec![0.5, 0.25]);
        assert!(matches!(read_history_csv(&b"epoch,loss\n1\n"[..]), Err(Error::Malformed(_))));
    }
}
