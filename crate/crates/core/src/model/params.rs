use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Weights inherited from the backbone.
    Pretrained,
    /// Weights introduced for recursion (retrospective module).
    New,
}

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub value: Arc<Tensor<S>>,
    pub group: ParamGroup,
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter and returns its index. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, group: ParamGroup) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let ix = self.params.len();
        self.index.insert(name.clone(), ix);
        self.params.push(Param {
            name,
            value: Arc::new(value),
            group,
        });
        ix
    }

    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> usize {
        let normal = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::lit(normal.sample(rng))).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).unwrap(), group)
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], value: f64, group: ParamGroup) -> usize {
        self.add(name, Tensor::full(shape, S::lit(value)), group)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|i| &*self.params[i].value)
    }

    pub fn param(&self, ix: usize) -> &Param<S> {
        &self.params[ix]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    /// Mutable access to a parameter tensor; clones if the storage is shared.
    pub fn tensor_mut(&mut self, ix: usize) -> &mut Tensor<S> {
        Arc::make_mut(&mut self.params[ix].value)
    }

    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Option<()> {
        let ix = self.index_of(name)?;
        assert_eq!(self.params[ix].value.shape(), value.shape(), "shape change for {name}");
        self.params[ix].value = Arc::new(value);
        Some(())
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn numel_in(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Places every parameter on `graph`, trainable or as constants.
    pub fn bind<'g>(&self, graph: &'g Graph<S>, trainable: bool) -> Vec<Var<'g, S>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    graph.param(p.value.clone())
                } else {
                    graph.constant_shared(p.value.clone())
                }
            })
            .collect()
    }
}

impl<S: Scalar> PartialEq for ParamStore<S> {
    fn eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.group == b.group && a.value == b.value)
    }
}
