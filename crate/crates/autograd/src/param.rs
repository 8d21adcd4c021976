//! Named parameter storage that outlives individual tapes.

use std::ops::Index;

use crate::error::{Result, TensorError};
use crate::tape::{numel, Tape, TensorId};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        let expected = numel(shape);
        if shape.is_empty() || expected != data.len() || expected == 0 {
            return Err(TensorError::ParamLength { name, expected, got: data.len() });
        }
        self.params.push(Param { name, shape: shape.to_vec(), data });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

/// Tape handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<TensorId>,
}

impl Bound {
    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

impl Index<ParamId> for Bound {
    type Output = TensorId;

    fn index(&self, id: ParamId) -> &TensorId {
        &self.ids[id.0]
    }
}

impl Tape {
    /// Copies every parameter onto the tape as a leaf.
    pub fn bind(&mut self, store: &ParamStore, requires_grad: bool) -> Bound {
        let ids = store
            .iter()
            .map(|p| self.leaf(&p.shape, p.data.clone(), requires_grad).expect("store shapes are validated"))
            .collect();
        Bound { ids }
    }

    /// Gradients of the bound parameters, zero for parameters the loss does
    /// not reach.
    pub fn grads_of(&self, bound: &Bound) -> Vec<Vec<f64>> {
        bound
            .ids
            .iter()
            .map(|&id| self.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.value(id).len()]))
            .collect()
    }
}
