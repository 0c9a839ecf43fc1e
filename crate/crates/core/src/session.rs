//! Binds named parameters into a fresh recording graph.

use std::collections::BTreeMap;

use crome_autodiff::{Graph, Tensor, Var};

use crate::error::Result;
use crate::params::ParamStore;

/// One forward/backward pass worth of graph state. Parameters are inserted
/// lazily the first time a block asks for them; those the predicate marks
/// trainable become gradient-carrying leaves, the rest are constants.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    bound: BTreeMap<String, Var>,
}

impl<'a> Session<'a> {
    /// Everything frozen: pure inference.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::with_trainable(store, |_| false)
    }

    pub fn with_trainable(store: &'a ParamStore, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Self { graph: Graph::new(), store, trainable: Box::new(trainable), bound: BTreeMap::new() }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let value = self.store.require(name)?.clone();
        let v = self.graph.leaf(value, (self.trainable)(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        (self.trainable)(name)
    }

    /// Gradients for every trainable parameter in the store. Parameters the
    /// loss never reached get an explicit zero gradient.
    pub fn trainable_grads(&self) -> BTreeMap<String, Tensor> {
        self.store
            .iter()
            .filter(|(name, _)| (self.trainable)(name))
            .map(|(name, value)| {
                let g = self
                    .bound
                    .get(name)
                    .and_then(|v| self.graph.grad(*v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                (name.to_string(), g)
            })
            .collect()
    }
}
