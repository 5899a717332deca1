//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the tape, so node indices already form a
//! topological order. [`Tape::backward`] walks the indices downward from the
//! loss and visits each producing operation once.
//!
//! Index-shuffling operations (broadcast, transpose, slicing) are all
//! expressed through [`Tape::gather`], whose adjoint is a scatter-add.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::linalg;
use super::tensor::{matmul_raw, numel, transpose_raw, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Sin(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    Reshape(Var),
    Gather(Var, Rc<[usize]>),
    Sum(Var),
    SumAxis { input: Var, outer: usize, len: usize, inner: usize },
    Concat(Vec<Var>),
    Inverse(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation for later gradient evaluation.
#[derive(Debug)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    kink_margin: Cell<f64>,
    pieces: RefCell<Vec<i8>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            kink_margin: Cell::new(f64::INFINITY),
            pieces: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    fn note_kink(&self, dist: f64) {
        if dist < self.kink_margin.get() {
            self.kink_margin.set(dist);
        }
    }

    /// Smallest distance from any ReLU input or clamp input to its kink seen
    /// so far. Finite differences with a step well below this margin do not
    /// cross a non-differentiable point. Inputs that are exactly zero are
    /// skipped: they are structural (padding, slices a ReLU already zeroed)
    /// and stay zero under perturbation.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin.get()
    }

    /// Which linear piece every ReLU and clamp input fell on, in recording
    /// order. Two evaluations of the same computation with equal patterns lie
    /// on one smooth piece.
    pub fn piece_pattern(&self) -> Vec<i8> {
        self.pieces.borrow().clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input tensor.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes.borrow()[v.0].value.item()
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.nodes.borrow()[a.0].value.map(f);
        self.push(out, op)
    }

    fn binary(&self, a: Var, b: Var, what: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            same_shape(x, y, what)?;
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        Ok(self.push(out, op))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |p, q| p * q)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a, b), |p, q| p / q)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |v| v * s)
    }

    pub fn offset(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |v| v + c)
    }

    pub fn relu(&self, a: Var) -> Var {
        let margin = self.nodes.borrow()[a.0]
            .value
            .data()
            .iter()
            .filter(|v| **v != 0.0)
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        self.note_kink(margin);
        self.pieces.borrow_mut().extend(self.nodes.borrow()[a.0].value.data().iter().map(|v| i8::from(*v > 0.0)));
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a).expect("same node has same shape")
    }

    /// Entrywise `x * sigmoid(x)`.
    pub fn silu(&self, a: Var) -> Var {
        let s = self.sigmoid(a);
        self.mul(a, s).expect("same shape")
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let margin = self.nodes.borrow()[a.0]
            .value
            .data()
            .iter()
            .filter(|v| **v != 0.0)
            .fold(f64::INFINITY, |m, v| m.min((v - lo).abs()).min((v - hi).abs()));
        self.note_kink(margin);
        self.pieces
            .borrow_mut()
            .extend(self.nodes.borrow()[a.0].value.data().iter().map(|&v| i8::from(v > lo) + i8::from(v >= hi)));
        self.unary(a, Op::Clamp(a, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)?
        };
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let out = self.nodes.borrow()[a.0].value.softmax_rows()?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes.borrow()[a.0].value.reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// `out[j] = a.flat[indices[j]]`, reshaped to `shape`.
    pub fn gather(&self, a: Var, indices: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != indices.len() || shape.contains(&0) {
            return Err(shape_err(format!("gather of {} indices into shape {shape:?}", indices.len())));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let src = nodes[a.0].value.data();
            if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
                return Err(shape_err(format!("gather index {bad} out of range {}", src.len())));
            }
            Tensor::from_parts(shape.to_vec(), indices.iter().map(|&i| src[i]).collect())
        };
        Ok(self.push(out, Op::Gather(a, indices)))
    }

    /// Numpy-style broadcast: shapes are right-aligned and size-1 axes expand.
    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(a);
        if from == shape {
            return Ok(a);
        }
        let indices = broadcast_indices(&from, shape)?;
        self.gather(a, indices.into(), shape)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 2 {
            return Err(shape_err(format!("transpose of shape {shape:?}")));
        }
        let (m, n) = (shape[0], shape[1]);
        let idx: Vec<usize> = (0..n).flat_map(|j| (0..m).map(move |i| i * n + j)).collect();
        self.gather(a, idx.into(), &[n, m])
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.0].value.sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.nodes.borrow()[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(shape_err(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let data = {
            let nodes = self.nodes.borrow();
            let src = nodes[a.0].value.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += src[base + i];
                    }
                }
            }
            out
        };
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::SumAxis { input: a, outer, len, inner }))
    }

    /// Flattens and concatenates the inputs into one vector.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat of zero tensors"));
        }
        let data: Vec<f64> = {
            let nodes = self.nodes.borrow();
            parts.iter().flat_map(|p| nodes[p.0].value.data().iter().copied()).collect()
        };
        let n = data.len();
        Ok(self.push(Tensor::from_parts(vec![n], data), Op::Concat(parts.to_vec())))
    }

    /// Inverse of a square matrix.
    pub fn inverse(&self, a: Var) -> Result<Var> {
        let out = linalg::inverse(&self.nodes.borrow()[a.0].value)?;
        Ok(self.push(out, Op::Inverse(a)))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, g.mul(val(*b))?);
                    accumulate(&mut grads, *b, g.mul(val(*a))?);
                }
                Op::Div(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let ga = zip3(&g, y, y, |g, y, _| g / y);
                    let gb = zip3(&g, x, y, |g, x, y| -g * x / (y * y));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Offset(a) => accumulate(&mut grads, *a, g.clone()),
                Op::MatMul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let (m, k) = (x.shape()[0], x.shape()[1]);
                    let n = y.shape()[1];
                    let yt = transpose_raw(y.data(), k, n);
                    let ga = matmul_raw(g.data(), &yt, m, n, k);
                    let xt = transpose_raw(x.data(), m, k);
                    let gb = matmul_raw(&xt, g.data(), k, m, n);
                    accumulate(&mut grads, *a, Tensor::from_parts(vec![m, k], ga));
                    accumulate(&mut grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
                Op::Relu(a) => {
                    let ga = zip3(&g, val(*a), val(*a), |g, x, _| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip3(&g, &node.value, &node.value, |g, y, _| g * y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sin(a) => {
                    let ga = zip3(&g, val(*a), val(*a), |g, x, _| g * x.cos());
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = zip3(&g, &node.value, &node.value, |g, y, _| g * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = zip3(&g, val(*a), val(*a), |g, x, _| g / x);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = zip3(&g, &node.value, &node.value, |g, y, _| if y > 0.0 { 0.5 * g / y } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = zip3(&g, val(*a), val(*a), |g, x, _| if x >= lo && x <= hi { g } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let n = y.shape()[1];
                    let mut ga = vec![0.0; y.len()];
                    for ((grow, yrow), out) in g.data().chunks(n).zip(y.data().chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for ((o, &gv), &yv) in out.iter_mut().zip(grow).zip(yrow) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::from_parts(y.shape().to_vec(), ga));
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::from_parts(shape, g.data().to_vec()));
                }
                Op::Gather(a, indices) => {
                    let src = val(*a);
                    let mut ga = vec![0.0; src.len()];
                    for (&i, &gv) in indices.iter().zip(g.data()) {
                        ga[i] += gv;
                    }
                    accumulate(&mut grads, *a, Tensor::from_parts(src.shape().to_vec(), ga));
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::filled(val(*a).shape(), gv));
                }
                Op::SumAxis { input, outer, len, inner } => {
                    let (outer, len, inner) = (*outer, *len, *inner);
                    let mut ga = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            ga[base..base + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                        }
                    }
                    accumulate(&mut grads, *input, Tensor::from_parts(val(*input).shape().to_vec(), ga));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = val(*p).shape().to_vec();
                        let n = numel(&shape);
                        let piece = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        accumulate(&mut grads, *p, Tensor::from_parts(shape, piece));
                    }
                }
                Op::Inverse(a) => {
                    // d(A^-1) = -A^-1 dA A^-1, so gA = -Y^T g Y^T
                    let y = &node.value;
                    let n = y.shape()[0];
                    let yt = transpose_raw(y.data(), n, n);
                    let left = matmul_raw(&yt, g.data(), n, n, n);
                    let ga = matmul_raw(&left, &yt, n, n, n);
                    let ga = Tensor::from_parts(vec![n, n], ga).scale(-1.0);
                    accumulate(&mut grads, *a, ga);
                }
            }
            grads[idx] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip3(g: &Tensor, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(a.data()).zip(b.data()).map(|((&g, &a), &b)| f(g, a, b)).collect();
    Tensor::from_parts(g.shape().to_vec(), data)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_indices(from: &[usize], to: &[usize]) -> Result<Vec<usize>> {
    if from.len() > to.len() {
        return Err(shape_err(format!("cannot broadcast {from:?} to {to:?}")));
    }
    let pad = to.len() - from.len();
    let mut padded = vec![1; pad];
    padded.extend_from_slice(from);
    for (f, t) in padded.iter().zip(to) {
        if *f != *t && *f != 1 {
            return Err(shape_err(format!("cannot broadcast {from:?} to {to:?}")));
        }
    }
    let src_strides = strides(&padded);
    let dst_strides = strides(to);
    let total = numel(to);
    let mut out = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut src = 0;
        for (axis, &ds) in dst_strides.iter().enumerate() {
            let coord = rem / ds;
            rem %= ds;
            if padded[axis] != 1 {
                src += coord * src_strides[axis];
            }
        }
        out.push(src);
    }
    Ok(out)
}
