//! Named parameter registry.
//!
//! Names are hierarchical (`qformer.block2.cross.k_proj`); freeze masks and
//! checkpoints address parameters through them only.

use std::collections::BTreeMap;

use crome_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{CromeError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Draws the initial value from a stream keyed by `(seed, name)`, so
    /// adding or removing other parameters never shifts this one.
    pub fn materialize(&self, seed: u64) -> Tensor {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::filled(&self.shape, 1.0),
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &self.name));
                Tensor::randn(&self.shape, std, &mut rng)
            }
        }
    }
}

/// Stable 64-bit seed derived from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn tensor_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            if store.params.contains_key(&spec.name) {
                return Err(CromeError::Contract(format!("duplicate parameter {}", spec.name)));
            }
            store.params.insert(spec.name.clone(), spec.materialize(seed));
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| CromeError::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params.iter().filter(|(k, _)| pred(k)).map(|(_, v)| v.numel()).sum()
    }

    /// Per-tensor content hashes, keyed by name.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.params.iter().map(|(k, v)| (k.clone(), tensor_hash(v))).collect()
    }
}
