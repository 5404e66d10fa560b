//! Named parameter storage shared by the model, optimizer and checkpoints.

use rand::Rng;

use crate::tensor::{Tape, Tensor, Var};

/// Stable handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors. Order is creation order
/// and is relied on for deterministic optimizer state and serialization.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| n == &name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
        ParamId(self.entries.len() - 1)
    }

    pub fn add_randn<R: Rng>(
        &mut self,
        rng: &mut R,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
    ) -> ParamId {
        self.add(name, Tensor::randn(rng, shape, std))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn tensor_mut_by_index(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    /// Register every tensor as a tape leaf, in store order.
    pub fn bind(&self, tape: &Tape) -> TapeBinding {
        TapeBinding {
            vars: self.entries.iter().map(|(_, t)| tape.leaf(t.clone())).collect(),
        }
    }
}

/// Tape leaves for every parameter of a store, aligned by [`ParamId`].
pub struct TapeBinding {
    vars: Vec<Var>,
}

impl TapeBinding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
