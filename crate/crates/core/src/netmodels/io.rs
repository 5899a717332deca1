//! The `weightsym/1` JSON envelope shared by parameters, group elements and
//! checkpoints. Numbers are written with 17 significant digits so a
//! decode/encode round trip reproduces every `f64` bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const FORMAT_VERSION: &str = "weightsym/1";

/// A flat `f64` list serialized in exact decimal form.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactData(pub Vec<f64>);

impl Serialize for ExactData {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut out = String::with_capacity(self.0.len() * 24 + 2);
        out.push('[');
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{v:.16e}").expect("write to string");
        }
        out.push(']');
        let raw = RawValue::from_string(out).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ExactData {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Vec::<f64>::deserialize(d).map(ExactData)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorDoc {
    pub shape: Vec<usize>,
    pub data: ExactData,
}

impl From<&Tensor> for TensorDoc {
    fn from(t: &Tensor) -> Self {
        TensorDoc { shape: t.shape().to_vec(), data: ExactData(t.data().to_vec()) }
    }
}

impl TensorDoc {
    pub fn to_tensor(&self, name: &str) -> Result<Tensor> {
        let n = self.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        if n != Some(self.data.0.len()) {
            return Err(Error::Malformed(format!(
                "tensor `{name}`: shape {:?} does not match {} values",
                self.shape,
                self.data.0.len()
            )));
        }
        Tensor::new(self.shape.clone(), self.data.0.clone())
            .map_err(|e| Error::Malformed(format!("tensor `{name}`: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    pub dims: Vec<usize>,
    pub tensors: BTreeMap<String, TensorDoc>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub perms: BTreeMap<String, Vec<usize>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub flags: BTreeMap<String, bool>,
}

impl Envelope {
    pub fn new(arch: Option<&str>, kind: Option<&str>, dims: Vec<usize>) -> Self {
        Envelope {
            version: FORMAT_VERSION.to_string(),
            arch: arch.map(str::to_string),
            kind: kind.map(str::to_string),
            dims,
            tensors: BTreeMap::new(),
            perms: BTreeMap::new(),
            flags: BTreeMap::new(),
        }
    }

    pub fn put(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.insert(name.into(), TensorDoc::from(t));
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Malformed(format!("missing tensor `{name}`")))?.to_tensor(name)
    }

    pub fn perm(&self, name: &str) -> Result<&[usize]> {
        self.perms.get(name).map(Vec::as_slice).ok_or_else(|| Error::Malformed(format!("missing permutation `{name}`")))
    }

    pub fn check_version(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Version { found: self.version.clone(), expected: FORMAT_VERSION.into() });
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind.as_deref() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Malformed(format!("expected kind `{kind}`, found {other:?}"))),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let env: Envelope = serde_json::from_slice(bytes).map_err(|e| Error::Malformed(e.to_string()))?;
        env.check_version()?;
        Ok(env)
    }
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn awkward_values_round_trip_bit_exactly() {
        let vals = vec![
            0.1,
            -0.0,
            f64::MIN_POSITIVE,
            5e-324,
            f64::MAX,
            -f64::MAX,
            1.0 / 3.0,
            std::f64::consts::PI,
            123_456_789.123_456_79,
        ];
        let mut env = Envelope::new(Some("mlp"), None, vec![9]);
        env.put("x", &Tensor::vector(vals.clone()).unwrap());
        let back = Envelope::from_json(env.to_json().as_bytes()).unwrap();
        let got = back.tensor("x").unwrap();
        for (a, b) in vals.iter().zip(got.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn version_checked() {
        let doc = br#"{"version":"weightsym/0","dims":[],"tensors":{}}"#;
        assert!(matches!(Envelope::from_json(doc), Err(Error::Version { .. })));
    }

    #[test]
    fn overflowing_shape_is_malformed() {
        let doc = format!(
            r#"{{"version":"weightsym/1","dims":[],"tensors":{{"a":{{"shape":[{},4],"data":[1.0]}}}}}}"#,
            usize::MAX
        );
        let env = Envelope::from_json(doc.as_bytes()).unwrap();
        assert!(matches!(env.tensor("a"), Err(Error::Malformed(_))));
    }
}
