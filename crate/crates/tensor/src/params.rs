use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    grad: Option<Vec<f64>>,
}

impl Param {
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
///
/// Frozen parameters never appear here.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap {
    grads: BTreeMap<ParamId, Vec<f64>>,
}

impl GradMap {
    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += g),
            None => {
                self.grads.insert(id, grad.to_vec());
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(&id).map(Vec::as_slice)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Named parameter tensors with their accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    dirty: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        self.insert(name.into(), value, true)
    }

    /// Registers a parameter that is never differentiated nor updated.
    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.params.push(Param {
            name,
            value,
            trainable,
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.params[id.0].grad.as_deref()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of trainable scalar values.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Whether gradients from a backward pass are waiting to be consumed.
    pub fn has_gradients(&self) -> bool {
        self.dirty
    }

    /// Stores the gradients of one backward pass.
    ///
    /// Fails with [`TensorError::StaleGradients`] when gradients from an
    /// earlier pass were not cleared with [`ParamStore::zero_grad`].
    pub fn accumulate(&mut self, grads: &GradMap) -> Result<()> {
        if self.dirty {
            return Err(TensorError::StaleGradients);
        }
        for (id, g) in grads.iter() {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
                None => p.grad = Some(g.to_vec()),
            }
        }
        self.dirty = true;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
        self.dirty = false;
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }
}
