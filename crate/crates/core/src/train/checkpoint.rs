//! Binary checkpoint format. The byte layout is described in
//! `docs/checkpoint-format.md`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crome_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::optim::OptimizerState;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"CROMECKP";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),
    #[error("checkpoint format version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint lacks tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {found:?} in checkpoint but {expected:?} in model")]
    ShapeMismatch { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("checkpoint io on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

type CkResult<T> = std::result::Result<T, CheckpointError>;

/// Serialized state of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> CkResult<ChaCha8Rng> {
        let bad = |what: &str| CheckpointError::CorruptHeader(format!("bad rng {what}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed"))?
            .try_into()
            .map_err(|_| bad("seed length"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub stage: String,
    /// Optimizer steps completed.
    pub step: u64,
    #[serde(default)]
    pub rng: Option<RngState>,
    /// Fingerprint of the run configuration that produced the checkpoint.
    #[serde(default)]
    pub config_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_parts(meta: CheckpointMeta, params: &ParamStore, opt: Option<&OptimizerState>) -> Self {
        let mut tensors: BTreeMap<String, Tensor> =
            params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        if let Some(opt) = opt {
            for (k, v) in &opt.m {
                tensors.insert(format!("{OPT_M}{k}"), v.clone());
            }
            for (k, v) in &opt.v {
                tensors.insert(format!("{OPT_V}{k}"), v.clone());
            }
        }
        Self { meta, tensors }
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("opt."))
            .map(|(k, v)| (k.as_str(), v))
    }

    /// Optimizer moments, if the checkpoint carries them.
    pub fn optimizer_state(&self) -> Option<OptimizerState> {
        let mut st = OptimizerState { step: self.meta.step, ..Default::default() };
        for (k, v) in &self.tensors {
            if let Some(n) = k.strip_prefix(OPT_M) {
                st.m.insert(n.to_string(), v.clone());
            } else if let Some(n) = k.strip_prefix(OPT_V) {
                st.v.insert(n.to_string(), v.clone());
            }
        }
        (!st.m.is_empty()).then_some(st)
    }

    /// Copies parameters into `store`. Every store parameter selected by
    /// `prefixes` (all of them when `None`) must be present with a matching
    /// shape; nothing is written unless all of them are.
    pub fn apply_to(&self, store: &mut ParamStore, prefixes: Option<&[&str]>) -> CkResult<usize> {
        let selected: Vec<String> = store
            .names()
            .filter(|n| prefixes.is_none_or(|ps| ps.iter().any(|p| n.starts_with(p))))
            .map(str::to_string)
            .collect();
        for name in &selected {
            let src = self.tensors.get(name).ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            let dst = store.get(name).expect("listed from store");
            if src.shape() != dst.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    found: src.shape().to_vec(),
                    expected: dst.shape().to_vec(),
                });
            }
        }
        for name in &selected {
            store.insert(name.clone(), self.tensors[name].clone());
        }
        Ok(selected.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            let nbytes = (t.numel() * 8) as u64;
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&nbytes.to_le_bytes());
            offset += nbytes;
        }
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CkResult<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::CorruptHeader("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| CheckpointError::CorruptHeader(format!("metadata: {e}")))?;
        let n = r.u32()? as usize;
        let mut table = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CheckpointError::CorruptHeader("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(CheckpointError::CorruptHeader(format!("unknown dtype {dtype} for {name}")));
            }
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let offset = r.u64()? as usize;
            let nbytes = r.u64()? as usize;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if numel.and_then(|k| k.checked_mul(8)) != Some(nbytes) {
                return Err(CheckpointError::CorruptHeader(format!("size of {name} disagrees with its shape")));
            }
            table.push((name, shape, offset, nbytes));
        }
        let payload = &bytes[r.pos..];
        let mut tensors = BTreeMap::new();
        for (name, shape, offset, nbytes) in table {
            let end = offset
                .checked_add(nbytes)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| CheckpointError::CorruptHeader(format!("payload of {name} truncated")))?;
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::CorruptHeader(format!("tensor {name} listed twice")));
            }
        }
        Ok(Self { meta, tensors })
    }

    /// Writes to a sibling temporary file first, then renames.
    pub fn save(&self, path: &Path) -> CkResult<()> {
        let io = |e| CheckpointError::Io { path: path.display().to_string(), source: e };
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> CkResult<Self> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> CkResult<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> CkResult<Checkpoint> {
    Checkpoint::load(path)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CkResult<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::CorruptHeader(format!("file truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> CkResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> CkResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
