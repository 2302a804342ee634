//! Named parameter storage and gradient accumulators.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Every weight of a model, addressed by a unique dotted name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor, trainable: true });
        Ok(id)
    }

    /// Registers a `normal(0, std)` initialised parameter.
    pub fn normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: Float,
        rng: &mut R,
    ) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape, 1.0))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Sum of parameter sizes whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.numel())
            .sum()
    }
}

/// Per-parameter gradient accumulators, aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradStore {
    grads: Vec<Option<Vec<Float>>>,
}

impl GradStore {
    pub fn new(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[Float]> {
        self.grads[id.0].as_deref()
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[Float], scale: Float) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += scale * g),
            slot @ None => *slot = Some(grad.iter().map(|g| scale * g).collect()),
        }
    }

    /// Adds `other` into `self`, parameter by parameter in index order.
    pub fn merge(&mut self, other: &GradStore) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g, 1.0);
            }
        }
    }

    pub fn scale(&mut self, factor: Float) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn global_norm(&self) -> Float {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<Float>())
            .sum::<Float>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[Float])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}
