//! Named parameter storage and per-graph binding.

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered name → tensor table. Iteration order is lexicographic, which keeps
/// checkpoints and optimizer updates deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        self.entries.insert(name.into(), Param { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| TensorError::Contract(format!("missing parameter `{name}`")))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn num_values(&self, trainable: bool) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable == trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// SHA-256 over the names and payload bytes of every frozen parameter.
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.entries.iter().filter(|(_, p)| !p.trainable) {
            h.update(name.as_bytes());
            h.update(p.tensor.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn merge(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }
}

/// Lazily records parameters as graph leaves, once per graph.
pub struct Binder<'a> {
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Binder {
            store,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var, TensorError> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self
            .store
            .param(name)
            .ok_or_else(|| TensorError::Contract(format!("missing parameter `{name}`")))?;
        let v = g.leaf(p.tensor.clone(), p.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Bound trainable parameters, sorted by name.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = self
            .bound
            .iter()
            .filter(|(name, _)| self.store.param(name).is_some_and(|p| p.trainable))
            .map(|(k, &v)| (k.clone(), v))
            .collect();
        out.sort();
        out
    }

    /// Uses `var` for `name` instead of a fresh leaf from the store.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    pub fn bound(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }
}
