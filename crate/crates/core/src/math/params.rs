//! Named parameter storage with EMA updates and JSON-serializable trees.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::tensor::Tensor;
use crate::scalar::Scalar;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

/// Handle to one parameter tensor inside a `ParamStore`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }

    pub(crate) fn from_index(index: usize) -> Self {
        Self(index)
    }
}

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("parameter trees are not congruent: {0}")]
    Incongruent(String),
    #[error("duplicate parameter name: {0}")]
    DuplicateName(String),
}

/// Ordered collection of named parameter tensors.
///
/// Every store carries a process-unique id so a `Graph` can route gradients
/// back to the store its parameter nodes came from.
#[derive(Debug)]
pub struct ParamStore<S> {
    uid: u64,
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    index: BTreeMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.to_string(), id.0);
        self.names.push(name.to_string());
        self.values.push(value);
        id
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|t| t.all_finite())
    }

    /// Structural clone with a fresh store uid (used for EMA copies).
    pub fn clone_detached(&self) -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            index: self.index.clone(),
        }
    }

    fn check_congruent(&self, other: &Self) -> Result<(), ParamError> {
        if self.names != other.names {
            return Err(ParamError::Incongruent("parameter names differ".into()));
        }
        for (a, b) in self.values.iter().zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(ParamError::Incongruent(format!(
                    "shape mismatch: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// `self <- rate * self + (1 - rate) * live`, elementwise.
    pub fn ema_update_from(&mut self, live: &Self, rate: S) -> Result<(), ParamError> {
        self.check_congruent(live)?;
        let one_minus = S::one() - rate;
        for (ema, lv) in self.values.iter_mut().zip(&live.values) {
            for (e, &l) in ema.data_mut().iter_mut().zip(lv.data()) {
                *e = rate * *e + one_minus * l;
            }
        }
        Ok(())
    }

    /// Copy all values from another congruent store.
    pub fn copy_from(&mut self, other: &Self) -> Result<(), ParamError> {
        self.check_congruent(other)?;
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Serializable name -> tensor map.
    pub fn to_tree(&self) -> ParamTree<S> {
        ParamTree {
            entries: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    /// Load values from a tree produced by a congruent store.
    pub fn load_tree(&mut self, tree: &ParamTree<S>) -> Result<(), ParamError> {
        for (name, idx) in self.index.clone() {
            let t = tree
                .entries
                .get(&name)
                .ok_or_else(|| ParamError::Incongruent(format!("missing parameter {name}")))?;
            if t.shape() != self.values[idx].shape() {
                return Err(ParamError::Incongruent(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    self.values[idx].shape()
                )));
            }
            self.values[idx] = t.clone();
        }
        if tree.entries.len() != self.values.len() {
            return Err(ParamError::Incongruent(format!(
                "tree has {} entries, store has {}",
                tree.entries.len(),
                self.values.len()
            )));
        }
        Ok(())
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Flat serializable parameter tree, ordered by name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamTree<S> {
    pub entries: BTreeMap<String, Tensor<S>>,
}
