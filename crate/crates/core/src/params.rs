//! Named parameter storage and per-forward binding onto a tape.

use std::collections::HashMap;

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered table of named tensors. Every trainable tensor lives here exactly
/// once; blocks that share weights hold the same [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, ParamId>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total scalar count, each stored tensor counted once.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Lazily places parameters on a tape, one leaf per parameter per forward,
/// so a shared tensor read by several blocks accumulates every use.
pub struct Binder<'s, T> {
    store: &'s ParamStore<T>,
    trainable: Option<&'s [bool]>,
    vars: Vec<Option<Var>>,
}

impl<'s, T: Scalar> Binder<'s, T> {
    /// `trainable[i]` decides whether parameter `i` requests gradients;
    /// `None` binds everything as constants.
    pub fn new(store: &'s ParamStore<T>, trainable: Option<&'s [bool]>) -> Self {
        Binder {
            store,
            trainable,
            vars: vec![None; store.len()],
        }
    }

    /// Binder whose parameters are already on the tape: `vars[i]` stands in
    /// for parameter `i`. Lets a whole module be differentiated with respect
    /// to externally supplied leaves.
    pub fn preset(store: &'s ParamStore<T>, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::invalid(format!(
                "{} preset variables for {} parameters",
                vars.len(),
                store.len()
            )));
        }
        Ok(Binder {
            store,
            trainable: None,
            vars: vars.into_iter().map(Some).collect(),
        })
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let grad = self.trainable.map(|m| m[id.0]).unwrap_or(false);
        let v = tape.leaf(self.store.get(id).clone(), grad);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Gradients per parameter after `tape.backward`; `None` for parameters
    /// that were never read or are frozen.
    pub fn grads(&self, tape: &Tape<T>) -> Vec<Option<Tensor<T>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| tape.grad(v).cloned()))
            .collect()
    }
}
