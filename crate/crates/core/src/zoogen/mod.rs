//! Synthetic model zoos: small networks trained on toy tasks with sampled
//! hyperparameters, labelled by held-out accuracy, plus certified
//! group-action augmentation and persistence.

mod tasks;

pub use tasks::Task;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodels::{sha256_hex, Envelope, MhaBlockParams, MlpParams, NetParams, FORMAT_VERSION};
use crate::symmetry::{check_functional_equiv, current_fault, sample_gl, sample_monomial, with_fault, GroupElement};
use tasks::{corrupt, point_data, score_mha, score_mlp, train_mha, train_mlp, SeqTask};

/// Sampling ranges for per-entry hyperparameters. The learning rate is drawn
/// log-uniformly, everything else uniformly; bounds are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperRanges {
    pub lr: (f64, f64),
    pub epochs: (usize, usize),
    pub label_noise: (f64, f64),
    pub init_scale: (f64, f64),
}

impl HyperRanges {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        let ok = ordered(self.lr)
            && self.lr.0 > 0.0
            && ordered(self.label_noise)
            && self.label_noise.0 >= 0.0
            && self.label_noise.1 <= 0.5
            && ordered(self.init_scale)
            && self.init_scale.0 > 0.0
            && self.epochs.0 <= self.epochs.1;
        if !ok {
            return Err(Error::InvalidArgument(format!("degenerate hyperparameter ranges {self:?}")));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> Hyperparams {
        let (llo, lhi) = (self.lr.0.ln(), self.lr.1.ln());
        let uniform =
            |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..=hi) };
        Hyperparams {
            lr: uniform(rng, (llo, lhi)).exp(),
            epochs: rng.random_range(self.epochs.0..=self.epochs.1),
            label_noise: uniform(rng, self.label_noise),
            init_scale: uniform(rng, self.init_scale),
            seed: rng.random(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lr: f64,
    pub epochs: usize,
    pub label_noise: f64,
    pub init_scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Provenance {
    Original,
    /// Copy of entry `source` under the group element with SHA-256 `element`.
    Augmented {
        source: usize,
        element: String,
    },
}

impl Provenance {
    pub fn is_original(&self) -> bool {
        matches!(self, Provenance::Original)
    }

    pub fn describe(&self) -> String {
        match self {
            Provenance::Original => "original".into(),
            Provenance::Augmented { source, element } => format!("augmented-from:{source}:{element}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZooEntry {
    pub id: usize,
    pub params: NetParams,
    pub hyper: Hyperparams,
    pub label: f64,
    pub split: Split,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Zoo {
    pub task: Task,
    pub seed: u64,
    pub entries: Vec<ZooEntry>,
}

/// Shape and training budget of an MLP zoo.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpZooSpec {
    pub task: Task,
    pub dims: Vec<usize>,
    pub ranges: HyperRanges,
    pub n_train: usize,
    pub n_test: usize,
}

impl MlpZooSpec {
    /// 2-8-8-2 classifiers for the disc task, 1-8-8-1 regressors otherwise.
    pub fn new(task: Task) -> Result<Self> {
        let dims = match task {
            Task::TwoClass2d => vec![2, 8, 8, 2],
            Task::Regression1d => vec![1, 8, 8, 1],
            other => return Err(Error::InvalidArgument(format!("`{}` is a sequence task", other.name()))),
        };
        Ok(Self {
            task,
            dims,
            ranges: HyperRanges { lr: (0.02, 1.0), epochs: (0, 300), label_noise: (0.0, 0.3), init_scale: (0.3, 1.5) },
            n_train: 128,
            n_test: 512,
        })
    }
}

/// Shape and training budget of an attention-block zoo.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaZooSpec {
    pub task: Task,
    pub d: usize,
    pub d_h: usize,
    pub heads: usize,
    pub d_f: Option<usize>,
    pub seq_len: usize,
    pub ranges: HyperRanges,
    pub n_train: usize,
    pub n_test: usize,
    pub batch: usize,
}

impl MhaZooSpec {
    /// `h = 2`, `d = 8`, `d_h = 4`, feedforward width 8, sequences of 7.
    pub fn new(task: Task) -> Result<Self> {
        if !task.is_sequence() {
            return Err(Error::InvalidArgument(format!("`{}` is not a sequence task", task.name())));
        }
        Ok(Self {
            task,
            d: 8,
            d_h: 4,
            heads: 2,
            d_f: Some(8),
            seq_len: 7,
            ranges: HyperRanges { lr: (0.01, 0.5), epochs: (0, 30), label_noise: (0.0, 0.3), init_scale: (0.5, 1.5) },
            n_train: 64,
            n_test: 256,
            batch: 32,
        })
    }
}

/// Per-entry random stream derived from the zoo seed.
fn entry_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const TASK_STREAM: u64 = 0;
const SPLIT_STREAM: u64 = 1;
const ENTRY_STREAM_BASE: u64 = 1 << 32;

/// 70/15/15 split of `n` entries drawn from `rng`.
fn assign_splits(n: usize, rng: &mut impl Rng) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_train = (0.7 * n as f64).round() as usize;
    let n_val = (0.15 * n as f64).round() as usize;
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

fn check_count(n: usize) -> Result<()> {
    if n < 10 {
        return Err(Error::InvalidArgument(format!("a zoo needs at least 10 entries, asked for {n}")));
    }
    Ok(())
}

/// Trains `n` ReLU MLPs with sampled hyperparameters; a pure function of
/// `(spec, n, seed)`.
pub fn gen_mlp_zoo(n: usize, spec: &MlpZooSpec, seed: u64) -> Result<Zoo> {
    check_count(n)?;
    spec.ranges.validate()?;
    let mut trng = entry_rng(seed, TASK_STREAM);
    let train = point_data(spec.task, spec.n_train, &mut trng);
    let test = point_data(spec.task, spec.n_test, &mut trng);
    let splits = assign_splits(n, &mut entry_rng(seed, SPLIT_STREAM));
    let entries = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = entry_rng(seed, ENTRY_STREAM_BASE + i as u64);
            let hyper = spec.ranges.sample(&mut rng);
            let mut erng = ChaCha8Rng::seed_from_u64(hyper.seed);
            let mut p = MlpParams::random(&spec.dims, hyper.init_scale, &mut erng)?;
            let noisy = corrupt(spec.task, &train, hyper.label_noise, &mut erng);
            train_mlp(&mut p, spec.task, &noisy, hyper.lr, hyper.epochs);
            let label = score_mlp(&p, spec.task, &test);
            Ok(ZooEntry { id: i, params: p.into(), hyper, label, split: splits[i], provenance: Provenance::Original })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Zoo { task: spec.task, seed, entries })
}

/// Trains `n` single attention blocks on a sequence task.
pub fn gen_mha_zoo(n: usize, spec: &MhaZooSpec, seed: u64) -> Result<Zoo> {
    check_count(n)?;
    spec.ranges.validate()?;
    if spec.seq_len == 0 || spec.batch == 0 || spec.n_train == 0 || spec.n_test == 0 {
        return Err(Error::InvalidArgument("sequence length, batch and set sizes must be positive".into()));
    }
    let mut trng = entry_rng(seed, TASK_STREAM);
    let task = SeqTask::new(spec.task, spec.d, spec.seq_len, &mut trng);
    let train = task.sample(spec.n_train, &mut trng);
    let test = task.sample(spec.n_test, &mut trng);
    let splits = assign_splits(n, &mut entry_rng(seed, SPLIT_STREAM));
    let entries = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = entry_rng(seed, ENTRY_STREAM_BASE + i as u64);
            let hyper = spec.ranges.sample(&mut rng);
            let mut erng = ChaCha8Rng::seed_from_u64(hyper.seed);
            let mut p = MhaBlockParams::random(spec.d, spec.d_h, spec.heads, spec.d_f, hyper.init_scale, &mut erng)?;
            let mut noisy = train.clone();
            for y in &mut noisy.y {
                if erng.random::<f64>() < hyper.label_noise {
                    *y = 1.0 - *y;
                }
            }
            train_mha(&mut p, &task, &noisy, hyper.lr, hyper.epochs, spec.batch)?;
            let label = score_mha(&p, &task, &test)?;
            Ok(ZooEntry { id: i, params: p.into(), hyper, label, split: splits[i], provenance: Provenance::Original })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Zoo { task: spec.task, seed, entries })
}

/// How augmented copies are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augmentation {
    /// Diagonal entries uniform on `[1, 10^scale_exp]`, optionally with
    /// random permutations.
    Monomial { scale_exp: u32, permute: bool },
    /// Random head permutation and GL factors with entries in `[-spread, spread]`.
    Gl { spread: f64 },
}

impl Augmentation {
    fn sample(&self, p: &NetParams, rng: &mut impl Rng) -> Result<GroupElement> {
        match (self, p) {
            (Augmentation::Monomial { scale_exp, permute }, NetParams::Mlp(_) | NetParams::Conv1d(_)) => {
                let dims = match p {
                    NetParams::Mlp(m) => m.dims(),
                    NetParams::Conv1d(c) => c.channels(),
                    NetParams::Mha(_) => unreachable!(),
                };
                Ok(sample_monomial(&dims, 1.0, 10f64.powi(*scale_exp as i32), *permute, rng)?.into())
            }
            (Augmentation::Gl { spread }, NetParams::Mha(m)) => {
                Ok(sample_gl(m.num_heads(), m.head_dim(), *spread, rng)?.into())
            }
            _ => Err(Error::Architecture(format!("{self:?} does not act on {} networks", p.arch().name()))),
        }
    }

    /// Whether copy `copy` of `source` is close enough to count as the same
    /// function.
    fn certify(&self, source: &NetParams, copy: &NetParams, rng: &mut impl Rng) -> Result<bool> {
        let r = check_functional_equiv(source, copy, 8, 1.0, f64::INFINITY, rng)?;
        Ok(match self {
            Augmentation::Monomial { scale_exp, .. } => r.max_abs_diff < 1e-6 * 10f64.powi(*scale_exp as i32),
            Augmentation::Gl { spread } => {
                let out = if r.max_rel_diff > 0.0 { r.max_abs_diff / r.max_rel_diff } else { 0.0 };
                r.max_abs_diff < 1e-6 * spread * out.max(1.0)
            }
        })
    }

    fn validate(&self) -> Result<()> {
        match self {
            Augmentation::Monomial { scale_exp, .. } if !(1..=4).contains(scale_exp) => {
                Err(Error::InvalidArgument(format!("scale exponent {scale_exp} outside 1..=4")))
            }
            Augmentation::Gl { spread } if !(*spread > 0.0 && spread.is_finite()) => {
                Err(Error::InvalidArgument(format!("GL spread {spread}")))
            }
            _ => Ok(()),
        }
    }
}

/// Keeps every entry and appends `factor - 1` transformed copies of each,
/// with the source's label and split. Every copy is checked for functional
/// equivalence; a failure aborts with [`Error::Certification`].
pub fn augment_zoo(zoo: &Zoo, factor: usize, aug: Augmentation, seed: u64) -> Result<Zoo> {
    if factor < 2 {
        return Err(Error::InvalidArgument(format!("augmentation factor {factor} must be at least 2")));
    }
    aug.validate()?;
    let fault = current_fault();
    let copies = zoo
        .entries
        .par_iter()
        .map(|e| {
            let run = || {
                let mut rng = entry_rng(seed, ENTRY_STREAM_BASE + e.id as u64);
                (1..factor)
                    .map(|_| {
                        let g = aug.sample(&e.params, &mut rng)?;
                        let params = g.act(&e.params)?;
                        if !aug.certify(&e.params, &params, &mut rng)? {
                            return Err(Error::Certification(format!("copy of entry {} is not equivalent", e.id)));
                        }
                        let element = sha256_hex(&g.serialize());
                        Ok((params, e, Provenance::Augmented { source: e.id, element }))
                    })
                    .collect::<Result<Vec<_>>>()
            };
            match fault {
                Some(f) => with_fault(f, run),
                None => run(),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut entries = zoo.entries.clone();
    let first = entries.iter().map(|e| e.id + 1).max().unwrap_or(0);
    for (id, (params, src, provenance)) in (first..).zip(copies.into_iter().flatten()) {
        entries.push(ZooEntry { id, params, hyper: src.hyper, label: src.label, split: src.split, provenance });
    }
    Ok(Zoo { task: zoo.task, seed: zoo.seed, entries })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ZooDoc {
    version: String,
    kind: String,
    task: Task,
    seed: u64,
    entries: Vec<EntryDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryDoc {
    id: usize,
    split: Split,
    label: f64,
    hyper: Hyperparams,
    provenance: Provenance,
    params: Envelope,
}

/// One row of the zoo manifest CSV.
#[derive(Debug, Serialize)]
struct ManifestRow<'a> {
    id: usize,
    split: &'a str,
    label: f64,
    provenance: String,
}

impl Zoo {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Networks and labels of one split, optionally originals only.
    pub fn split(&self, split: Split, originals_only: bool) -> (Vec<&NetParams>, Vec<f64>) {
        self.entries
            .iter()
            .filter(|e| e.split == split && (!originals_only || e.provenance.is_original()))
            .map(|e| (&e.params, e.label))
            .unzip()
    }

    pub fn to_json(&self) -> String {
        let doc = ZooDoc {
            version: FORMAT_VERSION.into(),
            kind: "zoo".into(),
            task: self.task,
            seed: self.seed,
            entries: self
                .entries
                .iter()
                .map(|e| EntryDoc {
                    id: e.id,
                    split: e.split,
                    label: e.label,
                    hyper: e.hyper,
                    provenance: e.provenance.clone(),
                    params: e.params.to_envelope(),
                })
                .collect(),
        };
        serde_json::to_string(&doc).expect("zoo serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let doc: ZooDoc = serde_json::from_slice(bytes).map_err(|e| Error::Malformed(e.to_string()))?;
        if doc.version != FORMAT_VERSION {
            return Err(Error::Version { found: doc.version, expected: FORMAT_VERSION.into() });
        }
        if doc.kind != "zoo" {
            return Err(Error::Malformed(format!("expected a zoo, found `{}`", doc.kind)));
        }
        let mut entries = Vec::with_capacity(doc.entries.len());
        let mut seen = std::collections::HashSet::new();
        for e in doc.entries {
            if !seen.insert(e.id) {
                return Err(Error::Malformed(format!("duplicate entry id {}", e.id)));
            }
            if !(0.0..=1.0).contains(&e.label) {
                return Err(Error::Malformed(format!("entry {} has label {}", e.id, e.label)));
            }
            let params = NetParams::from_envelope(&e.params)?;
            entries.push(ZooEntry {
                id: e.id,
                params,
                hyper: e.hyper,
                label: e.label,
                split: e.split,
                provenance: e.provenance,
            });
        }
        let zoo = Zoo { task: doc.task, seed: doc.seed, entries };
        zoo.check_consistency()?;
        Ok(zoo)
    }

    /// Every entry shares one architecture and every copy carries its
    /// source's label and split.
    pub fn check_consistency(&self) -> Result<()> {
        let Some(first) = self.entries.first() else {
            return Ok(());
        };
        let sig = first.params.signature();
        let by_id: std::collections::HashMap<usize, &ZooEntry> = self.entries.iter().map(|e| (e.id, e)).collect();
        for e in &self.entries {
            if e.params.signature() != sig {
                return Err(Error::Malformed(format!("entry {} has a different architecture", e.id)));
            }
            if let Provenance::Augmented { source, .. } = &e.provenance {
                let src =
                    by_id.get(source).ok_or_else(|| Error::Malformed(format!("entry {} has unknown source", e.id)))?;
                if src.split != e.split || src.label.to_bits() != e.label.to_bits() {
                    return Err(Error::Malformed(format!("entry {} disagrees with its source {source}", e.id)));
                }
            }
        }
        Ok(())
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read(path)?)
    }

    /// CSV with columns `id, split, label, provenance`.
    pub fn write_manifest<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            let row =
                ManifestRow { id: e.id, split: e.split.name(), label: e.label, provenance: e.provenance.describe() };
            w.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
        Ok(())
    }
}
