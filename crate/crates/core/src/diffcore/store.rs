//! Named parameter tensors with JSON checkpointing.
//!
//! Checkpoint layout: one JSON document
//! `{"version":1,"kind":…,"seed":…,"params":{name:{"shape":[…],"data":[…]}}}`.
//! Floats are written in shortest-round-trip decimal form, so
//! `load(save(x)) == x` bit-for-bit.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Graph, Tensor, Var};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("parameter {0} already exists")]
    DuplicateParam(String),
    #[error("parameter {0} not found")]
    MissingParam(String),
    #[error("parameter {name}: shape {have:?} does not match stored {want:?}")]
    ShapeMismatch {
        name: String,
        have: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

/// Ordered map of named parameter tensors plus checkpoint metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamStore {
    version: u32,
    kind: String,
    seed: u64,
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new(kind: &str, seed: u64) -> Self {
        Self {
            version: 1,
            kind: kind.to_string(),
            seed,
            params: IndexMap::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Adds a new parameter; names are unique.
    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<(), StoreError> {
        if self.params.contains_key(name) {
            return Err(StoreError::DuplicateParam(name.to_string()));
        }
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, StoreError> {
        self.params
            .get(name)
            .ok_or_else(|| StoreError::MissingParam(name.to_string()))
    }

    /// Replaces a parameter's values; the shape is immutable.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<(), StoreError> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| StoreError::MissingParam(name.to_string()))?;
        if slot.shape() != t.shape() {
            return Err(StoreError::ShapeMismatch {
                name: name.to_string(),
                have: t.shape().to_vec(),
                want: slot.shape().to_vec(),
            });
        }
        *slot = t;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Binds every parameter into `graph` as a tracked leaf, in insertion
    /// order.
    pub fn bind(&self, graph: &Graph) -> IndexMap<String, Var> {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), graph.param(t.clone())))
            .collect()
    }

    /// In-place SGD update `p ← p − lr·g` for every named gradient.
    pub fn sgd_step(
        &mut self,
        lr: f64,
        grads: &IndexMap<String, Tensor>,
    ) -> Result<(), StoreError> {
        for (name, grad) in grads {
            let slot = self
                .params
                .get_mut(name)
                .ok_or_else(|| StoreError::MissingParam(name.clone()))?;
            if slot.shape() != grad.shape() {
                return Err(StoreError::ShapeMismatch {
                    name: name.clone(),
                    have: grad.shape().to_vec(),
                    want: slot.shape().to_vec(),
                });
            }
            for (p, g) in slot.data_mut().iter_mut().zip(grad.data()) {
                *p -= lr * g;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let text = std::fs::read_to_string(path)?;
        let store: Self = serde_json::from_str(&text)?;
        if store.version != 1 {
            return Err(StoreError::Version(store.version));
        }
        Ok(store)
    }
}
