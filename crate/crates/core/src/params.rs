//! Named parameter stores and their attachment to tapes.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng};
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Declaration of every parameter a model owns: hierarchical name -> shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShapeMap {
    shapes: BTreeMap<String, Vec<usize>>,
}

impl ShapeMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>) {
        self.shapes.insert(name.into(), shape);
    }

    pub fn merge(&mut self, other: ShapeMap) {
        self.shapes.extend(other.shapes);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<usize>)> {
        self.shapes.iter()
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Vec<usize>> {
        self.shapes.get(name)
    }

    /// Total number of scalar parameters declared.
    pub fn total_elements(&self) -> usize {
        self.shapes.values().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Map from hierarchical name to tensor. Iteration order is deterministic
/// (sorted by name); names are unique by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    seed: u64,
    params: BTreeMap<String, Tensor<T>>,
}

/// Initialize a store from a shape declaration. Rank-4 tensors are treated as
/// convolution kernels and drawn from a zero-mean normal with scale
/// `sqrt(2 / fan_in)`; everything else (biases, scalars) starts at zero.
/// Per-parameter streams are derived from `(seed, name)`, so the result does
/// not depend on declaration order.
pub fn init_parameters<T: Scalar>(spec: &ShapeMap, seed: u64) -> Result<ParameterStore<T>> {
    let mut params = BTreeMap::new();
    for (name, shape) in spec.iter() {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidConfig(format!(
                "parameter `{name}` has a zero extent: {shape:?}"
            )));
        }
        let tensor = if shape.len() == 4 {
            let fan_in: usize = shape[1] * shape[2] * shape[3];
            let scale = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, scale).expect("valid stddev");
            let mut rng = seeded_rng(derive_seed(seed, name, 0));
            Tensor::from_fn(shape, |_| T::from_f64(normal.sample(&mut rng)))
        } else {
            Tensor::zeros(shape)
        };
        params.insert(name.clone(), tensor);
    }
    Ok(ParameterStore { seed, params })
}

impl<T: Scalar> ParameterStore<T> {
    pub fn empty(seed: u64) -> Self {
        Self { seed, params: BTreeMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    /// Replace a parameter value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.params.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.into()))?;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: format!("ParameterStore::set({name})"),
                detail: format!("{:?} vs {:?}", slot.shape(), value.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Insert a parameter that was not part of the original declaration.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
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

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn shape_map(&self) -> ShapeMap {
        let mut m = ShapeMap::new();
        for (name, t) in &self.params {
            m.insert(name.clone(), t.shape().to_vec());
        }
        m
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            seed: self.seed,
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Random uniform perturbation of every element, for test scaffolding.
    pub fn jitter(&mut self, amplitude: f64, seed: u64) {
        for (name, t) in self.params.iter_mut() {
            let mut rng = seeded_rng(derive_seed(seed, name, 1));
            *t = t.map(|v| v + T::from_f64(rng.random_range(-amplitude..amplitude)));
        }
    }
}

/// Named leaves of one store registered on a tape.
pub struct Binding {
    nodes: BTreeMap<String, NodeId>,
}

impl Binding {
    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.nodes.get(name).copied().ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.nodes.iter()
    }

    /// Collect loss gradients for every bound parameter, zeros where the loss
    /// never reached one.
    pub fn gradient_map<T: Scalar>(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.nodes.iter().map(|(name, &id)| (name.clone(), grads.get(id))).collect()
    }
}

/// Register every parameter of `store` as a leaf on `tape`.
pub fn bind_params<T: Scalar>(tape: &mut Tape<T>, store: &ParameterStore<T>, requires_grad: bool) -> Binding {
    let nodes = store
        .iter()
        .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone(), requires_grad)))
        .collect();
    Binding { nodes }
}
