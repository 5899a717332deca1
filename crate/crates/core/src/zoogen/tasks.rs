//! Toy tasks and the inner training loops that produce zoo entries.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodels::{FeedForward, HeadProj, MhaBlockParams, MlpParams};
use crate::numcore::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Points in `[-1, 1]^2`, class 1 inside the disc of area 2.
    #[serde(rename = "2d-two-class")]
    TwoClass2d,
    /// `y = sin(3x)` on `[-1, 1]`; the label is the clamped R².
    #[serde(rename = "1d-regression")]
    Regression1d,
    /// Sequences of ±1 tokens, class 1 when `+1` is in the majority.
    #[serde(rename = "sequence-majority")]
    SequenceMajority,
    /// Real tokens in `[-1, 1]`, class 1 when their sum is positive.
    #[serde(rename = "sum-sign")]
    SumSign,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::TwoClass2d => "2d-two-class",
            Task::Regression1d => "1d-regression",
            Task::SequenceMajority => "sequence-majority",
            Task::SumSign => "sum-sign",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Task::TwoClass2d, Task::Regression1d, Task::SequenceMajority, Task::SumSign]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task `{s}`")))
    }

    pub fn is_sequence(self) -> bool {
        matches!(self, Task::SequenceMajority | Task::SumSign)
    }
}

const DISC_RADIUS_SQ: f64 = 2.0 / std::f64::consts::PI;
const GRAD_CLIP: f64 = 5.0;

/// Inputs `[n, d_in]` with class indices or regression targets.
#[derive(Debug, Clone)]
pub(crate) struct PointData {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub d_in: usize,
}

impl PointData {
    pub fn len(&self) -> usize {
        self.y.len()
    }
}

pub(crate) fn point_data(task: Task, n: usize, rng: &mut impl Rng) -> PointData {
    match task {
        Task::TwoClass2d => {
            let mut x = Vec::with_capacity(2 * n);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                let (a, b) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
                x.extend([a, b]);
                y.push(if a * a + b * b < DISC_RADIUS_SQ { 1.0 } else { 0.0 });
            }
            PointData { x, y, d_in: 2 }
        }
        _ => {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let y = x.iter().map(|v: &f64| (3.0 * v).sin()).collect();
            PointData { x, y, d_in: 1 }
        }
    }
}

/// Flips a `noise` fraction of class labels, or adds Gaussian noise of that
/// standard deviation to regression targets.
pub(crate) fn corrupt(task: Task, data: &PointData, noise: f64, rng: &mut impl Rng) -> PointData {
    let mut out = data.clone();
    for y in &mut out.y {
        match task {
            Task::Regression1d => *y += noise * rng.sample::<f64, _>(StandardNormal),
            _ => {
                if rng.random::<f64>() < noise {
                    *y = 1.0 - *y;
                }
            }
        }
    }
    out
}

fn forward_cache(p: &MlpParams, x: &[f64]) -> Vec<Vec<f64>> {
    let mut acts = vec![x.to_vec()];
    let last = p.num_layers() - 1;
    for (i, l) in p.layers().iter().enumerate() {
        let (rows, cols) = (l.weight.shape()[0], l.weight.shape()[1]);
        let w = l.weight.data();
        let prev = acts.last().expect("input");
        let z: Vec<f64> = (0..rows)
            .map(|r| {
                let s: f64 = (0..cols).map(|c| w[r * cols + c] * prev[c]).sum::<f64>() + l.bias.data()[r];
                if i < last {
                    s.max(0.0)
                } else {
                    s
                }
            })
            .collect();
        acts.push(z);
    }
    acts
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Per-layer weight and bias gradients of the mean cross-entropy
/// (classification) or squared error (regression).
fn mlp_gradient(p: &MlpParams, task: Task, data: &PointData) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = data.len();
    let nl = p.num_layers();
    let mut gw: Vec<Vec<f64>> = p.layers().iter().map(|l| vec![0.0; l.weight.len()]).collect();
    let mut gb: Vec<Vec<f64>> = p.layers().iter().map(|l| vec![0.0; l.bias.len()]).collect();
    for s in 0..n {
        let x = &data.x[s * data.d_in..(s + 1) * data.d_in];
        let acts = forward_cache(p, x);
        let out = &acts[nl];
        let mut delta: Vec<f64> = match task {
            Task::Regression1d => vec![2.0 * (out[0] - data.y[s]) / n as f64],
            _ => {
                let mut pr = softmax(out);
                pr[data.y[s] as usize] -= 1.0;
                pr.into_iter().map(|v| v / n as f64).collect()
            }
        };
        for i in (0..nl).rev() {
            let l = &p.layers()[i];
            let cols = l.weight.shape()[1];
            let prev = &acts[i];
            for (r, d) in delta.iter().enumerate() {
                gb[i][r] += d;
                for c in 0..cols {
                    gw[i][r * cols + c] += d * prev[c];
                }
            }
            if i > 0 {
                let w = l.weight.data();
                delta = (0..cols)
                    .map(|c| {
                        if prev[c] > 0.0 {
                            delta.iter().enumerate().map(|(r, d)| d * w[r * cols + c]).sum()
                        } else {
                            0.0
                        }
                    })
                    .collect();
            }
        }
    }
    (gw, gb)
}

/// Full-batch gradient descent with global gradient-norm clipping. Stops early if the parameters stop being finite, keeping the
/// last finite state.
pub(crate) fn train_mlp(p: &mut MlpParams, task: Task, data: &PointData, lr: f64, epochs: usize) {
    for _ in 0..epochs {
        let (gw, gb) = mlp_gradient(p, task, data);
        let norm = gw.iter().chain(&gb).flatten().map(|g| g * g).sum::<f64>().sqrt();
        let step = if norm > GRAD_CLIP { lr * GRAD_CLIP / norm } else { lr };
        let backup = p.clone();
        for (i, l) in p.layers_mut().iter_mut().enumerate() {
            for (w, g) in l.weight.data_mut().iter_mut().zip(&gw[i]) {
                *w -= step * g;
            }
            for (b, g) in l.bias.data_mut().iter_mut().zip(&gb[i]) {
                *b -= step * g;
            }
        }
        if !p.layers().iter().all(|l| l.weight.all_finite() && l.bias.all_finite()) {
            *p = backup;
            return;
        }
    }
}

/// Held-out accuracy, or clamped R² for regression.
pub(crate) fn score_mlp(p: &MlpParams, task: Task, data: &PointData) -> f64 {
    let n = data.len();
    let outs: Vec<Vec<f64>> =
        (0..n).map(|s| forward_cache(p, &data.x[s * data.d_in..(s + 1) * data.d_in]).pop().expect("output")).collect();
    match task {
        Task::Regression1d => {
            let mean = data.y.iter().sum::<f64>() / n as f64;
            let var: f64 = data.y.iter().map(|y| (y - mean) * (y - mean)).sum();
            let sse: f64 = outs.iter().zip(&data.y).map(|(o, y)| (o[0] - y) * (o[0] - y)).sum();
            (1.0 - sse / var).clamp(0.0, 1.0)
        }
        _ => {
            let hits = outs
                .iter()
                .zip(&data.y)
                .filter(|(o, &y)| {
                    let pred = if o[1] > o[0] { 1.0 } else { 0.0 };
                    pred == y
                })
                .count();
            hits as f64 / n as f64
        }
    }
}

/// Token sequences already embedded to `[len, d]`, with binary labels.
#[derive(Debug, Clone)]
pub(crate) struct SeqData {
    pub seqs: Vec<Tensor>,
    pub y: Vec<f64>,
}

/// Fixed token embeddings and read-out vector of a sequence task.
#[derive(Debug, Clone)]
pub(crate) struct SeqTask {
    pub task: Task,
    pub len: usize,
    plus: Vec<f64>,
    minus: Vec<f64>,
    pub readout: Vec<f64>,
}

impl SeqTask {
    pub fn new(task: Task, d: usize, len: usize, rng: &mut impl Rng) -> Self {
        let mut g = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
        let plus = g(d);
        let minus = g(d);
        let r = g(d);
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self { task, len, plus, minus, readout: r.into_iter().map(|v| v / norm).collect() }
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> SeqData {
        let d = self.plus.len();
        let mut seqs = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let mut data = Vec::with_capacity(self.len * d);
            let mut total = 0.0;
            for _ in 0..self.len {
                match self.task {
                    Task::SequenceMajority => {
                        let up = rng.random::<bool>();
                        total += if up { 1.0 } else { -1.0 };
                        data.extend(if up { &self.plus } else { &self.minus });
                    }
                    _ => {
                        let v: f64 = rng.random_range(-1.0..=1.0);
                        total += v;
                        data.extend(self.plus.iter().zip(&self.minus).map(|(p, m)| v * p + 0.5 * m));
                    }
                }
            }
            seqs.push(Tensor::from_parts(vec![self.len, d], data));
            y.push(if total > 0.0 { 1.0 } else { 0.0 });
        }
        SeqData { seqs, y }
    }

    /// Logit of one sequence: read-out of the token-averaged block output.
    pub fn logit(&self, p: &MhaBlockParams, seq: &Tensor) -> Result<f64> {
        let out = p.forward(seq)?;
        let (l, d) = (out.shape()[0], out.shape()[1]);
        Ok((0..d).map(|j| (0..l).map(|t| out.data()[t * d + j]).sum::<f64>() / l as f64 * self.readout[j]).sum())
    }
}

pub(crate) fn score_mha(p: &MhaBlockParams, task: &SeqTask, data: &SeqData) -> Result<f64> {
    let mut hits = 0;
    for (s, &y) in data.seqs.iter().zip(&data.y) {
        let pred = if task.logit(p, s)? > 0.0 { 1.0 } else { 0.0 };
        hits += usize::from(pred == y);
    }
    Ok(hits as f64 / data.y.len() as f64)
}

/// Block parameters as tape leaves: per head `[q, k, v, o]`, then the
/// feedforward `[w_a, b_a, w_b, b_b]`.
fn mha_leaves(tape: &Tape, p: &MhaBlockParams) -> Vec<Var> {
    let mut out: Vec<Var> = p.heads().iter().flat_map(|h| [0, 1, 2, 3].map(|r| tape.leaf(h.get(r).clone()))).collect();
    if let Some(ff) = p.feedforward() {
        out.extend([&ff.w_a, &ff.b_a, &ff.w_b, &ff.b_b].map(|t| tape.leaf(t.clone())));
    }
    out
}

/// Logits `[B]` for a batch of sequences, computed as one block-diagonal
/// attention over the stacked tokens.
pub(crate) fn mha_logits_on_tape(
    tape: &Tape,
    vars: &[Var],
    p: &MhaBlockParams,
    task: &SeqTask,
    seqs: &[&Tensor],
) -> Result<Var> {
    let (b, l) = (seqs.len(), task.len);
    let d = p.model_dim();
    let bt = b * l;
    let mut xs = Vec::with_capacity(bt * d);
    for s in seqs {
        xs.extend_from_slice(s.data());
    }
    let x = tape.leaf(Tensor::from_parts(vec![bt, d], xs));
    let mut mask = vec![-1e30; bt * bt];
    for s in 0..b {
        for i in 0..l {
            for j in 0..l {
                mask[(s * l + i) * bt + s * l + j] = 0.0;
            }
        }
    }
    let mask = tape.leaf(Tensor::from_parts(vec![bt, bt], mask));
    let temp = if p.scaled_attention { (p.head_dim() as f64).sqrt().recip() } else { 1.0 };
    let mut total: Option<Var> = None;
    for h in 0..p.num_heads() {
        let [q, k, v, o] = [0, 1, 2, 3].map(|r| vars[4 * h + r]);
        let qx = tape.matmul(x, q)?;
        let kx = tape.matmul(x, k)?;
        let logits = tape.add(tape.scale(tape.matmul(qx, tape.transpose(kx)?)?, temp), mask)?;
        let attn = tape.softmax_rows(logits)?;
        let out = tape.matmul(tape.matmul(attn, tape.matmul(x, v)?)?, tape.transpose(o)?)?;
        total = Some(match total {
            None => out,
            Some(t) => tape.add(t, out)?,
        });
    }
    let mut m = total.expect("at least one head");
    if p.feedforward().is_some() {
        let f = &vars[4 * p.num_heads()..];
        let df = tape.shape(f[1])[0];
        let hid = tape.add(tape.matmul(m, tape.transpose(f[0])?)?, tape.broadcast_to(f[1], &[bt, df])?)?;
        let hid = tape.relu(hid);
        m = tape.add(tape.matmul(hid, tape.transpose(f[2])?)?, tape.broadcast_to(f[3], &[bt, d])?)?;
    }
    let mut pool = vec![0.0; b * bt];
    for s in 0..b {
        for i in 0..l {
            pool[s * bt + s * l + i] = 1.0 / l as f64;
        }
    }
    let pooled = tape.matmul(tape.leaf(Tensor::from_parts(vec![b, bt], pool)), m)?;
    let r = tape.leaf(Tensor::from_parts(vec![d, 1], task.readout.clone()));
    tape.reshape(tape.matmul(pooled, r)?, &[b])
}

fn write_back(p: &mut MhaBlockParams, values: &[Tensor]) {
    let h = p.num_heads();
    for (i, head) in p.heads_mut().iter_mut().enumerate() {
        *head = HeadProj {
            query: values[4 * i].clone(),
            key: values[4 * i + 1].clone(),
            value: values[4 * i + 2].clone(),
            output: values[4 * i + 3].clone(),
        };
    }
    if let Some(ff) = p.feedforward_mut() {
        let f = &values[4 * h..];
        *ff = FeedForward { w_a: f[0].clone(), b_a: f[1].clone(), w_b: f[2].clone(), b_b: f[3].clone() };
    }
}

/// Mini-batch gradient descent on the logistic loss, with global
/// gradient-norm clipping.
pub(crate) fn train_mha(
    p: &mut MhaBlockParams,
    task: &SeqTask,
    data: &SeqData,
    lr: f64,
    epochs: usize,
    batch: usize,
) -> Result<()> {
    let n = data.y.len();
    for _ in 0..epochs {
        for start in (0..n).step_by(batch) {
            let end = (start + batch).min(n);
            let tape = Tape::new();
            let vars = mha_leaves(&tape, p);
            let seqs: Vec<&Tensor> = data.seqs[start..end].iter().collect();
            let logits = mha_logits_on_tape(&tape, &vars, p, task, &seqs)?;
            let target = Tensor::vector(data.y[start..end].to_vec())?;
            let loss = crate::numcore::bce_on_tape(&tape, tape.sigmoid(logits), &target)?;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
            let norm = g.iter().map(|t| t.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
            let step = if norm > GRAD_CLIP { lr * GRAD_CLIP / norm } else { lr };
            let updated: Vec<Tensor> =
                vars.iter().zip(&g).map(|(&v, gt)| tape.value(v).sub(&gt.scale(step))).collect::<Result<_>>()?;
            if !updated.iter().all(Tensor::all_finite) {
                return Ok(());
            }
            write_back(p, &updated);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp_loss(p: &MlpParams, task: Task, data: &PointData) -> f64 {
        let n = data.len();
        let total: f64 = (0..n)
            .map(|s| {
                let out = forward_cache(p, &data.x[s * data.d_in..(s + 1) * data.d_in]).pop().expect("output");
                match task {
                    Task::Regression1d => (out[0] - data.y[s]).powi(2),
                    _ => -softmax(&out)[data.y[s] as usize].ln(),
                }
            })
            .sum();
        total / n as f64
    }

    fn fd_check(task: Task, dims: &[usize], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = MlpParams::random(dims, 1.0, &mut rng).unwrap();
        let data = point_data(task, 20, &mut rng);
        let (gw, gb) = mlp_gradient(&p, task, &data);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..p.num_layers() {
            for (is_bias, grads) in [(false, &gw[i]), (true, &gb[i])] {
                for (k, analytic) in grads.iter().enumerate() {
                    let bump = |delta: f64| {
                        let mut q = p.clone();
                        let l = &mut q.layers_mut()[i];
                        let t = if is_bias { &mut l.bias } else { &mut l.weight };
                        t.data_mut()[k] += delta;
                        mlp_loss(&q, task, &data)
                    };
                    let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                    worst = worst.max((analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8));
                }
            }
        }
        assert!(worst < 1e-5, "{task:?}: {worst}");
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        fd_check(Task::TwoClass2d, &[2, 8, 8, 2], 1);
        fd_check(Task::Regression1d, &[1, 8, 8, 1], 2);
    }

    #[test]
    fn training_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = MlpParams::random(&[2, 8, 8, 2], 1.0, &mut rng).unwrap();
        let data = point_data(Task::TwoClass2d, 128, &mut rng);
        let before = mlp_loss(&p, Task::TwoClass2d, &data);
        train_mlp(&mut p, Task::TwoClass2d, &data, 0.3, 100);
        assert!(mlp_loss(&p, Task::TwoClass2d, &data) < before);
    }

    #[test]
    fn disc_task_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = point_data(Task::TwoClass2d, 20_000, &mut rng);
        let frac = data.y.iter().sum::<f64>() / data.len() as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn corruption_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = point_data(Task::TwoClass2d, 10_000, &mut rng);
        assert_eq!(corrupt(Task::TwoClass2d, &data, 0.0, &mut rng).y, data.y);
        let noisy = corrupt(Task::TwoClass2d, &data, 0.3, &mut rng);
        let flipped = noisy.y.iter().zip(&data.y).filter(|(a, b)| a != b).count() as f64 / 10_000.0;
        assert!((flipped - 0.3).abs() < 0.02, "{flipped}");
    }

    #[test]
    fn batched_logits_match_per_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = MhaBlockParams::random(8, 4, 2, Some(8), 1.0, &mut rng).unwrap();
        for task in [Task::SequenceMajority, Task::SumSign] {
            let t = SeqTask::new(task, 8, 7, &mut rng);
            let data = t.sample(5, &mut rng);
            let tape = Tape::new();
            let vars = mha_leaves(&tape, &p);
            let seqs: Vec<&Tensor> = data.seqs.iter().collect();
            let batched = tape.value(mha_logits_on_tape(&tape, &vars, &p, &t, &seqs).unwrap());
            for (s, &b) in data.seqs.iter().zip(batched.data()) {
                assert!((t.logit(&p, s).unwrap() - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn majority_is_learnable() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = SeqTask::new(Task::SequenceMajority, 8, 7, &mut rng);
        let train = t.sample(64, &mut rng);
        let test = t.sample(256, &mut rng);
        let mut p = MhaBlockParams::random(8, 4, 2, Some(8), 1.0, &mut rng).unwrap();
        train_mha(&mut p, &t, &train, 0.1, 30, 32).unwrap();
        let acc = score_mha(&p, &t, &test).unwrap();
        assert!(acc > 0.8, "{acc}");
    }

    #[test]
    fn task_names_round_trip() {
        for t in [Task::TwoClass2d, Task::Regression1d, Task::SequenceMajority, Task::SumSign] {
            assert_eq!(Task::parse(t.name()).unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{}\"", t.name()));
        }
        assert!(Task::parse("xor").is_err());
    }
}
