use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};
use crate::numcore::Tensor;

/// One affine layer `x -> W x + b` with `W: [n_out, n_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Parameters of a ReLU multilayer perceptron. No activation follows the
/// last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<DenseLayer>,
}

pub(crate) fn gaussian(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite gaussian samples")
}

impl MlpParams {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape_err("an MLP needs at least one layer"));
        }
        let mut prev: Option<usize> = None;
        for (i, l) in layers.iter().enumerate() {
            let (out, inp) = l.weight.expect_matrix("MLP weight")?;
            if l.bias.shape() != [out] {
                return Err(shape_err(format!(
                    "layer {}: bias shape {:?} does not match {out} outputs",
                    i + 1,
                    l.bias.shape()
                )));
            }
            if let Some(p) = prev {
                if p != inp {
                    return Err(shape_err(format!(
                        "layer {} takes {inp} inputs but the previous layer has {p} outputs",
                        i + 1
                    )));
                }
            }
            prev = Some(out);
        }
        Ok(Self { layers })
    }

    /// Gaussian weights with standard deviation `init_scale / sqrt(fan_in)`,
    /// Gaussian biases with standard deviation `0.1 * init_scale`.
    pub fn random(dims: &[usize], init_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(shape_err(format!("MLP dims {dims:?} need an input and an output")));
        }
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer {
                weight: gaussian(&[w[1], w[0]], init_scale / (w[0] as f64).sqrt(), rng),
                bias: gaussian(&[w[1]], 0.1 * init_scale, rng),
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `[n_0, n_1, ..., n_L]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].weight.shape()[1]];
        d.extend(self.layers.iter().map(|l| l.weight.shape()[0]));
        d
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Evaluates the network on one input vector.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n0 = self.dims()[0];
        if x.len() != n0 || x.rank() > 1 {
            return Err(shape_err(format!("MLP expects input of length {n0}, got {:?}", x.shape())));
        }
        let batch = x.reshape(&[1, n0])?;
        let out = self.forward_batch(&batch)?;
        out.reshape(&[out.len()])
    }

    /// Evaluates the network on each row of `xs: [batch, n_0]`.
    pub fn forward_batch(&self, xs: &Tensor) -> Result<Tensor> {
        let (b, n0) = xs.expect_matrix("MLP batch input")?;
        if n0 != self.dims()[0] {
            return Err(shape_err(format!("MLP expects {} input features, got {n0}", self.dims()[0])));
        }
        let mut h = xs.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&l.weight.transpose()?)?;
            let out = l.bias.len();
            let bias = l.bias.data();
            for row in z.data_mut().chunks_mut(out).take(b) {
                for (v, bv) in row.iter_mut().zip(bias) {
                    *v += bv;
                    if i < last && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            h = z;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(w: (usize, usize, Vec<f64>), b: Vec<f64>) -> DenseLayer {
        DenseLayer { weight: Tensor::matrix(w.0, w.1, w.2).unwrap(), bias: Tensor::vector(b).unwrap() }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = MlpParams::new(vec![DenseLayer { weight: Tensor::eye(3), bias: Tensor::zeros(&[3]) }]).unwrap();
        let x = Tensor::vector(vec![1.5, -2.0, 0.25]).unwrap();
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_final_bias() {
        let net = MlpParams::new(vec![
            layer((3, 2, vec![0.0; 6]), vec![1.0, -1.0, 2.0]),
            layer((2, 3, vec![0.0; 6]), vec![0.7, -0.3]),
        ])
        .unwrap();
        let out = net.forward(&Tensor::vector(vec![5.0, -9.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.7, -0.3]);
    }

    #[test]
    fn small_net_matches_scalar_loops() {
        let w1 = vec![1.0, -2.0, 0.0, 3.0, 2.0, 1.0];
        let b1 = vec![0.5, -1.0, 0.0];
        let w2 = vec![1.0, 1.0, -1.0, 2.0, 0.0, 1.0];
        let b2 = vec![0.0, 1.0];
        let net =
            MlpParams::new(vec![layer((3, 2, w1.clone()), b1.clone()), layer((2, 3, w2.clone()), b2.clone())]).unwrap();
        for x in [[1.0, 2.0], [-1.0, 0.5], [3.0, -3.0]] {
            let mut h = [0.0; 3];
            for r in 0..3 {
                let z = w1[r * 2] * x[0] + w1[r * 2 + 1] * x[1] + b1[r];
                h[r] = if z > 0.0 { z } else { 0.0 };
            }
            let mut y = [0.0; 2];
            for r in 0..2 {
                y[r] = (0..3).map(|c| w2[r * 3 + c] * h[c]).sum::<f64>() + b2[r];
            }
            let out = net.forward(&Tensor::vector(x.to_vec()).unwrap()).unwrap();
            assert_eq!(out.data(), &y);
        }
    }

    #[test]
    fn chaining_is_validated() {
        let bad =
            MlpParams::new(vec![layer((3, 2, vec![0.0; 6]), vec![0.0; 3]), layer((2, 4, vec![0.0; 8]), vec![0.0; 2])]);
        assert!(bad.is_err());
        assert!(MlpParams::new(vec![]).is_err());
    }

    #[test]
    fn input_dimension_checked() {
        let net = MlpParams::new(vec![DenseLayer { weight: Tensor::eye(2), bias: Tensor::zeros(&[2]) }]).unwrap();
        assert!(net.forward(&Tensor::vector(vec![1.0; 3]).unwrap()).is_err());
    }
}
