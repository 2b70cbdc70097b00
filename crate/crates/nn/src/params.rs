use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named parameter tensors in a stable (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    params: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Glorot-uniform weight matrix `[fan_in, fan_out]`.
    pub fn init_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let t = Tensor::from_fn(&[fan_in, fan_out], |_| F::of(dist.sample(rng)));
        self.insert(name, t);
    }

    /// Embedding table `[rows, dim]` with uniform entries of variance 1/dim.
    pub fn init_embedding(&mut self, name: &str, rows: usize, dim: usize, rng: &mut impl Rng) {
        let bound = (3.0 / dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let t = Tensor::from_fn(&[rows, dim], |_| F::of(dist.sample(rng)));
        self.insert(name, t);
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, F::of(value)));
    }
}
