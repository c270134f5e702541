//! Named parameter storage.
//!
//! Parameters live in one ordered store so the optimizer, the checkpoint
//! manifest, and gradient bookkeeping all see the same stable enumeration.
//! Model modules hold [`ParamId`] handles; each forward pass registers the
//! parameters it touches on the tape through a [`ParamLeaves`] cache so a
//! parameter used twice maps to a single leaf.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let id = self.names.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-forward cache mapping parameters to tape leaves.
pub struct ParamLeaves {
    slots: Vec<Option<ValueId>>,
}

impl ParamLeaves {
    pub fn new<S: Scalar>(store: &ParamStore<S>) -> Self {
        ParamLeaves { slots: vec![None; store.len()] }
    }

    pub fn leaf<S: Scalar>(
        &mut self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        id: ParamId,
    ) -> Result<ValueId> {
        if let Some(v) = self.slots[id.0] {
            return Ok(v);
        }
        let v = tape.leaf(store.get(id))?;
        self.slots[id.0] = Some(v);
        Ok(v)
    }

    /// The tape leaf this parameter got in the current forward, if any.
    pub fn registered(&self, id: ParamId) -> Option<ValueId> {
        self.slots[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(vec![2])).unwrap();
        assert!(store.add("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn leaves_are_cached_per_forward() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full(vec![3], 0.5)).unwrap();
        let mut tape = Tape::new();
        let mut leaves = ParamLeaves::new(&store);
        let a = leaves.leaf(&mut tape, &store, id).unwrap();
        let b = leaves.leaf(&mut tape, &store, id).unwrap();
        assert_eq!(a, b);
        assert_eq!(tape.num_nodes(), 1);
    }
}
