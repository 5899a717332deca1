//! Parameter records for the networks a metanetwork reads, their forward
//! passes, and their JSON encoding.

pub mod conv;
pub mod io;
pub mod mha;
pub mod mlp;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use conv::{Conv1dParams, ConvLayer};
pub use io::{sha256_hex, Envelope, FORMAT_VERSION};
pub use mha::{FeedForward, HeadProj, MhaBlockParams, HEAD_ROLES};
pub use mlp::{DenseLayer, MlpParams};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Architecture tag used in documents and zoo files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Conv1d,
    Mha,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::Conv1d => "conv1d",
            Arch::Mha => "mha",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "conv1d" => Ok(Arch::Conv1d),
            "mha" => Ok(Arch::Mha),
            other => Err(Error::Malformed(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Parameters of any supported architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum NetParams {
    Mlp(MlpParams),
    Conv1d(Conv1dParams),
    Mha(MhaBlockParams),
}

impl From<MlpParams> for NetParams {
    fn from(p: MlpParams) -> Self {
        NetParams::Mlp(p)
    }
}

impl From<Conv1dParams> for NetParams {
    fn from(p: Conv1dParams) -> Self {
        NetParams::Conv1d(p)
    }
}

impl From<MhaBlockParams> for NetParams {
    fn from(p: MhaBlockParams) -> Self {
        NetParams::Mha(p)
    }
}

impl NetParams {
    pub fn arch(&self) -> Arch {
        match self {
            NetParams::Mlp(_) => Arch::Mlp,
            NetParams::Conv1d(_) => Arch::Conv1d,
            NetParams::Mha(_) => Arch::Mha,
        }
    }

    /// MLP: `[n_0..n_L]`; conv: channels then windows; MHA: `[d, d_h, h(, d_f)]`.
    pub fn dims(&self) -> Vec<usize> {
        match self {
            NetParams::Mlp(p) => p.dims(),
            NetParams::Conv1d(p) => {
                let mut d = p.channels();
                d.extend(p.windows());
                d
            }
            NetParams::Mha(p) => p.dims(),
        }
    }

    /// Architecture plus every tensor shape; two parameter records with the
    /// same signature can be compared function-wise.
    pub fn signature(&self) -> (Arch, Vec<usize>) {
        (self.arch(), self.dims())
    }

    pub fn as_mlp(&self) -> Option<&MlpParams> {
        match self {
            NetParams::Mlp(p) => Some(p),
            _ => None,
        }
    }

    pub fn as_mha(&self) -> Option<&MhaBlockParams> {
        match self {
            NetParams::Mha(p) => Some(p),
            _ => None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            NetParams::Mlp(p) => p.forward(x),
            NetParams::Conv1d(p) => p.forward(x),
            NetParams::Mha(p) => p.forward(x),
        }
    }

    pub fn to_envelope(&self) -> Envelope {
        let mut env = Envelope::new(Some(self.arch().name()), None, self.dims());
        match self {
            NetParams::Mlp(p) => {
                for (i, l) in p.layers().iter().enumerate() {
                    env.put(format!("layer{}.weight", i + 1), &l.weight);
                    env.put(format!("layer{}.bias", i + 1), &l.bias);
                }
            }
            NetParams::Conv1d(p) => {
                for (i, l) in p.layers().iter().enumerate() {
                    env.put(format!("layer{}.filter", i + 1), &l.filter);
                    env.put(format!("layer{}.bias", i + 1), &l.bias);
                }
            }
            NetParams::Mha(p) => {
                for (i, h) in p.heads().iter().enumerate() {
                    for (role, name) in HEAD_ROLES.iter().enumerate() {
                        env.put(format!("head{}.{name}", i + 1), h.get(role));
                    }
                }
                if let Some(ff) = p.feedforward() {
                    env.put("ff.w_a", &ff.w_a);
                    env.put("ff.b_a", &ff.b_a);
                    env.put("ff.w_b", &ff.w_b);
                    env.put("ff.b_b", &ff.b_b);
                }
                if p.scaled_attention {
                    env.flags.insert("scaled_attention".into(), true);
                }
            }
        }
        env
    }

    pub fn from_envelope(env: &Envelope) -> Result<Self> {
        env.check_version()?;
        let arch = Arch::parse(env.arch.as_deref().ok_or_else(|| Error::Malformed("missing `arch`".into()))?)?;
        let malformed = |e: Error| match e {
            Error::Shape(m) => Error::Malformed(m),
            other => other,
        };
        let params = match arch {
            Arch::Mlp => {
                let n = env.dims.len().checked_sub(1).filter(|&n| n > 0);
                let n = n.ok_or_else(|| Error::Malformed("MLP dims need at least two entries".into()))?;
                let layers = (1..=n)
                    .map(|i| {
                        Ok(DenseLayer {
                            weight: env.tensor(&format!("layer{i}.weight"))?,
                            bias: env.tensor(&format!("layer{i}.bias"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                NetParams::Mlp(MlpParams::new(layers).map_err(malformed)?)
            }
            Arch::Conv1d => {
                if env.dims.len() < 3 || env.dims.len().is_multiple_of(2) {
                    return Err(Error::Malformed(format!("conv dims {:?}", env.dims)));
                }
                let n = env.dims.len() / 2;
                let layers = (1..=n)
                    .map(|i| {
                        Ok(ConvLayer {
                            filter: env.tensor(&format!("layer{i}.filter"))?,
                            bias: env.tensor(&format!("layer{i}.bias"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                NetParams::Conv1d(Conv1dParams::new(layers).map_err(malformed)?)
            }
            Arch::Mha => {
                if !(3..=4).contains(&env.dims.len()) {
                    return Err(Error::Malformed(format!("attention dims {:?}", env.dims)));
                }
                let heads = (1..=env.dims[2])
                    .map(|i| {
                        Ok(HeadProj {
                            query: env.tensor(&format!("head{i}.query"))?,
                            key: env.tensor(&format!("head{i}.key"))?,
                            value: env.tensor(&format!("head{i}.value"))?,
                            output: env.tensor(&format!("head{i}.output"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let ff = if env.dims.len() == 4 {
                    Some(FeedForward {
                        w_a: env.tensor("ff.w_a")?,
                        b_a: env.tensor("ff.b_a")?,
                        w_b: env.tensor("ff.w_b")?,
                        b_b: env.tensor("ff.b_b")?,
                    })
                } else {
                    None
                };
                let mut p = MhaBlockParams::new(heads, ff).map_err(malformed)?;
                p.scaled_attention = env.flags.get("scaled_attention").copied().unwrap_or(false);
                NetParams::Mha(p)
            }
        };
        if params.dims() != env.dims {
            return Err(Error::Malformed(format!(
                "declared dims {:?} disagree with tensors {:?}",
                env.dims,
                params.dims()
            )));
        }
        let expected = params.to_envelope().tensors.len();
        if env.tensors.len() != expected {
            return Err(Error::Malformed(format!(
                "document has {} tensors, architecture uses {expected}",
                env.tensors.len()
            )));
        }
        Ok(params)
    }

    /// Canonical JSON bytes.
    pub fn serialize(&self) -> Vec<u8> {
        self.to_envelope().to_json().into_bytes()
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        Self::from_envelope(&Envelope::from_json(bytes)?)
    }

    /// SHA-256 of the canonical serialization.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.serialize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::deserialize(&std::fs::read(path)?)
    }
}
