use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Real, Tensor, Var};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ModelParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// FNV-1a; a stable per-name stream id for initialization.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams {
            tensors: BTreeMap::new(),
        }
    }

    /// Inserts a parameter. Returns false (and leaves the registry untouched)
    /// when the name is already taken.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> bool {
        use std::collections::btree_map::Entry;
        match self.tensors.entry(name.into()) {
            Entry::Occupied(_) => false,
            Entry::Vacant(v) => {
                v.insert(tensor);
                true
            }
        }
    }

    /// He-style uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, each
    /// parameter drawn from its own stream keyed by `(seed, name)`.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) -> bool {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> bool {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
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

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Places every parameter on `graph`. Trainable bindings request
    /// gradients; frozen ones are constants.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), graph.leaf(v.clone(), trainable)))
                .collect(),
        }
    }
}

/// Graph handles for a [`ModelParams`] registry.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
