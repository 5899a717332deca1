use rand::Rng;

use super::autodiff::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Affine map `x -> W x + b` with trainable `W: [out, in]` and `b: [out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A [`Dense`] layer bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

impl Dense {
    /// Xavier-uniform weights, zero bias.
    pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)).collect();
        Dense { weight: Tensor::from_parts(vec![fan_out, fan_in], data), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense { weight: Tensor::zeros(&[fan_out, fan_in]), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn bind(&self, tape: &Tape) -> DenseVars {
        DenseVars { weight: tape.leaf(self.weight.clone()), bias: tape.leaf(self.bias.clone()) }
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }

    /// Applies the layer to each row of `x: [batch, in]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n) = x.expect_matrix("dense input")?;
        if n != self.fan_in() {
            return Err(shape_err(format!("dense layer expects {} inputs, got {n}", self.fan_in())));
        }
        let mut out = x.matmul(&self.weight.transpose()?)?;
        for row in out.data_mut().chunks_mut(self.fan_out()).take(b) {
            for (v, bv) in row.iter_mut().zip(self.bias.data()) {
                *v += bv;
            }
        }
        Ok(out)
    }
}

impl DenseVars {
    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }

    /// Applies the layer to each row of `x: [batch, in]`.
    pub fn apply(&self, tape: &Tape, x: Var) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.len() != 2 {
            return Err(shape_err(format!("dense input shape {xs:?}")));
        }
        let xw = tape.matmul(x, tape.transpose(self.weight)?)?;
        let out = tape.shape(xw)[1];
        let b = tape.broadcast_to(self.bias, &[xs[0], out])?;
        tape.add(xw, b)
    }
}
