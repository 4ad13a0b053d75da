//! Trainable parameters with full-precision master copies.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::element::Element;
use crate::tensor::Tensor;

/// A named trainable tensor. `master` is never quantized in place; quantized
/// views are recomputed from it on every forward.
#[derive(Debug, Clone)]
pub struct Parameter<T: Element> {
    pub name: String,
    pub master: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Ordered collection of parameters keyed by their path-like names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element> {
    params: IndexMap<String, Parameter<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: IndexMap::new() }
    }

    /// Panics on duplicate names; names come from fixed layer layouts.
    pub fn insert(&mut self, name: impl Into<String>, master: Tensor<T>) {
        let name = name.into();
        let prev = self.params.insert(name.clone(), Parameter { name: name.clone(), master, grad: None });
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.get_mut(name)
    }

    /// Master tensor of `name`; panics if absent (layer code only asks for
    /// names it created).
    pub fn master(&self, name: &str) -> &Tensor<T> {
        &self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).master
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Total number of scalar values.
    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.master.numel()).sum()
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Masters as an ordered name → tensor map.
    pub fn snapshot(&self) -> IndexMap<String, Tensor<T>> {
        self.params.iter().map(|(k, p)| (k.clone(), p.master.clone())).collect()
    }
}

/// He-normal initialization: `N(0, 2 / fan_in)`.
pub fn he_normal<T: Element>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches generated data")
}
