use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

/// A named trainable tensor together with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameter tensors with gradient accumulators.
///
/// Names are kept sorted so that iteration order, and therefore every
/// reduction over parameters, is deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    seed: u64,
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.into(), Param { value, grad });
    }

    /// Glorot-uniform initialization from a stream derived from the store seed
    /// and the parameter name, so adding parameters never perturbs others.
    pub fn init_glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = seeded(derive_seed(self.seed, name));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
        self.insert(
            name,
            Tensor::new(shape.to_vec(), data).expect("shape matches data"),
        );
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.into()))?;
        if p.grad.shape() != g.shape() {
            return Err(Error::Shape {
                node: format!("param `{name}`"),
                detail: format!("gradient {:?} vs parameter {:?}", g.shape(), p.grad.shape()),
            });
        }
        for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// L2 norm of the gradients of parameters whose name starts with `prefix`.
    pub fn grad_norm(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .flat_map(|(_, p)| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        self.clip_grad_norm_where(max_norm, |_| true)
    }

    /// [`ParamStore::clip_grad_norm`] restricted to parameters selected by `select`.
    pub fn clip_grad_norm_where(&mut self, max_norm: f64, select: impl Fn(&str) -> bool) -> f64 {
        let norm = self
            .params
            .iter()
            .filter(|(k, _)| select(k))
            .flat_map(|(_, p)| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            let c = max_norm / norm;
            for (_, p) in self.params.iter_mut().filter(|(k, _)| select(k)) {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= c);
            }
        }
        norm
    }

    /// Plain gradient descent: `p -= lr * grad`.
    pub fn sgd_step(&mut self, lr: f64) {
        self.sgd_step_where(lr, |_| true)
    }

    /// [`ParamStore::sgd_step`] restricted to parameters selected by `select`.
    pub fn sgd_step_where(&mut self, lr: f64, select: impl Fn(&str) -> bool) {
        for (_, p) in self.params.iter_mut().filter(|(k, _)| select(k)) {
            let Param { value, grad } = p;
            for (v, g) in value.data_mut().iter_mut().zip(grad.data()) {
                *v -= lr * g;
            }
        }
    }

    /// Adds `decay * value` to the gradients selected by `select`.
    pub fn add_weight_decay_where(&mut self, decay: f64, select: impl Fn(&str) -> bool) {
        for (_, p) in self.params.iter_mut().filter(|(k, _)| select(k)) {
            let Param { value, grad } = p;
            for (g, v) in grad.data_mut().iter_mut().zip(value.data()) {
                *g += decay * v;
            }
        }
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn absorb(&mut self, other: &ParamStore, prefix: &str) {
        for (k, p) in &other.params {
            if k.starts_with(prefix) {
                self.params.insert(k.clone(), p.clone());
            }
        }
    }

    pub(crate) fn raw_insert(&mut self, name: String, param: Param) {
        self.params.insert(name, param);
    }
}
