use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelError;
use crate::compute::{Graph, NodeId, Tensor};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let mut t = tensor;
        t.set_requires_grad(false);
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }
}

/// Binds parameters into one graph on first use.
pub struct Binder<'p> {
    graph: Graph,
    params: &'p ParamStore,
    bound: HashMap<String, NodeId>,
    trainable: bool,
}

impl<'p> Binder<'p> {
    /// `trainable` marks every bound parameter as differentiable.
    pub fn new(params: &'p ParamStore, trainable: bool) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: HashMap::new(),
            trainable,
        }
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId, ModelError> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let tensor = self
            .params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?
            .clone();
        let tensor = if self.trainable { tensor.with_grad() } else { tensor };
        let id = self.graph.input(name, tensor)?;
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }
}

pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}
