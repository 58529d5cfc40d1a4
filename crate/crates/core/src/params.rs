//! Named parameter storage shared by the backbone and the heads.

use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Ordered trainable tensors plus non-trainable buffers (running statistics).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    buffers: BTreeMap<String, Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Vec<f64>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn buffer(&self, name: &str) -> Option<&[f64]> {
        self.buffers.get(name).map(Vec::as_slice)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.buffers.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Records every parameter on `tape`; as leaves when `trainable`,
    /// otherwise as constants.
    pub fn bind<'t>(&'t self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Bound { vars, store: self }
    }
}

/// Parameters recorded on a tape for one pass.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
    store: &'t ParamStore,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    /// Gradient per parameter; `None` where the loss does not reach.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| grads.get(*v).cloned()).collect()
    }
}

pub(crate) fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

pub(crate) fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(IxDyn(shape))
}

pub(crate) fn ones(shape: &[usize]) -> Tensor {
    Tensor::ones(IxDyn(shape))
}
