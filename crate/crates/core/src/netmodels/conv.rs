use rand::Rng;

use super::mlp::gaussian;
use crate::error::{shape_err, Result};
use crate::numcore::Tensor;

/// Valid (unpadded, stride 1) 1-D convolution layer with
/// `filter: [n_out, n_in, window]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub filter: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn window(&self) -> usize {
        self.filter.shape()[2]
    }
}

/// Parameters of a ReLU 1-D convolutional network.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dParams {
    layers: Vec<ConvLayer>,
}

impl Conv1dParams {
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape_err("a conv net needs at least one layer"));
        }
        let mut prev: Option<usize> = None;
        for (i, l) in layers.iter().enumerate() {
            if l.filter.rank() != 3 {
                return Err(shape_err(format!("layer {}: filter shape {:?}", i + 1, l.filter.shape())));
            }
            let (out, inp) = (l.filter.shape()[0], l.filter.shape()[1]);
            if l.bias.shape() != [out] {
                return Err(shape_err(format!("layer {}: bias shape {:?}", i + 1, l.bias.shape())));
            }
            if prev.is_some_and(|p| p != inp) {
                return Err(shape_err(format!("layer {}: channel dimensions do not chain", i + 1)));
            }
            prev = Some(out);
        }
        Ok(Self { layers })
    }

    /// `channels = [n_0, ..., n_L]`, one window per layer.
    pub fn random(channels: &[usize], windows: &[usize], init_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        if channels.len() < 2 || windows.len() != channels.len() - 1 {
            return Err(shape_err(format!("conv channels {channels:?} vs windows {windows:?}")));
        }
        let layers = channels
            .windows(2)
            .zip(windows)
            .map(|(c, &w)| ConvLayer {
                filter: gaussian(&[c[1], c[0], w], init_scale / ((c[0] * w) as f64).sqrt(), rng),
                bias: gaussian(&[c[1]], 0.1 * init_scale, rng),
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn channels(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].filter.shape()[1]];
        d.extend(self.layers.iter().map(|l| l.filter.shape()[0]));
        d
    }

    pub fn windows(&self) -> Vec<usize> {
        self.layers.iter().map(ConvLayer::window).collect()
    }

    /// Cross-correlates `x: [n_0, T]` through every layer with ReLU between
    /// layers; output is `[n_L, T - sum(w_i - 1)]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c0, _) = x.expect_matrix("conv input")?;
        if c0 != self.channels()[0] {
            return Err(shape_err(format!("conv expects {} input channels, got {c0}", self.channels()[0])));
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (li, l) in self.layers.iter().enumerate() {
            let (cin, t) = (h.shape()[0], h.shape()[1]);
            let (cout, w) = (l.filter.shape()[0], l.window());
            if t < w {
                return Err(shape_err(format!("layer {}: sequence length {t} below window {w}", li + 1)));
            }
            let tout = t - w + 1;
            let f = l.filter.data();
            let hd = h.data();
            let mut out = vec![0.0; cout * tout];
            for o in 0..cout {
                for p in 0..tout {
                    let mut acc = l.bias.data()[o];
                    for c in 0..cin {
                        for k in 0..w {
                            acc += f[(o * cin + c) * w + k] * hd[c * t + p + k];
                        }
                    }
                    out[o * tout + p] = if li < last { acc.max(0.0) } else { acc };
                }
            }
            h = Tensor::from_parts(vec![cout, tout], out);
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodels::mlp::{DenseLayer, MlpParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn difference_filter() {
        let net = Conv1dParams::new(vec![ConvLayer {
            filter: Tensor::new(vec![1, 1, 2], vec![1.0, -1.0]).unwrap(),
            bias: Tensor::zeros(&[1]),
        }])
        .unwrap();
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 4.0]).unwrap();
        // [1*1 - 1*2, 1*2 - 1*4]
        assert_eq!(net.forward(&x).unwrap().data(), &[-1.0, -2.0]);
        let flipped = Conv1dParams::new(vec![ConvLayer {
            filter: Tensor::new(vec![1, 1, 2], vec![-1.0, 1.0]).unwrap(),
            bias: Tensor::zeros(&[1]),
        }])
        .unwrap();
        assert_eq!(flipped.forward(&x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_filters_broadcast_bias() {
        let net = Conv1dParams::new(vec![ConvLayer {
            filter: Tensor::zeros(&[2, 1, 2]),
            bias: Tensor::vector(vec![0.5, -0.5]).unwrap(),
        }])
        .unwrap();
        let out = net.forward(&Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5, 0.5, -0.5, -0.5, -0.5]);
    }

    #[test]
    fn window_one_matches_positionwise_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv1dParams::random(&[3, 5, 2], &[1, 1], 1.0, &mut rng).unwrap();
        let mlp = MlpParams::new(
            conv.layers()
                .iter()
                .map(|l| {
                    let (o, i) = (l.filter.shape()[0], l.filter.shape()[1]);
                    DenseLayer { weight: l.filter.reshape(&[o, i]).unwrap(), bias: l.bias.clone() }
                })
                .collect(),
        )
        .unwrap();
        let x = gaussian(&[3, 6], 1.0, &mut rng);
        let out = conv.forward(&x).unwrap();
        let xt = x.transpose().unwrap();
        for p in 0..6 {
            let col = Tensor::vector(xt.data()[p * 3..(p + 1) * 3].to_vec()).unwrap();
            let y = mlp.forward(&col).unwrap();
            for o in 0..2 {
                assert!((out.at2(o, p) - y.data()[o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn short_sequence_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv1dParams::random(&[1, 2], &[3], 1.0, &mut rng).unwrap();
        assert!(conv.forward(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).is_err());
    }
}
