use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{DmvError, Result};

/// Named parameter tensors in a fixed (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| DmvError::Contract(format!("unknown parameter `{name}`")))
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

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor)> + 'a {
        self.tensors.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Replace the tensor under `name`, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| DmvError::Contract(format!("unknown parameter `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(DmvError::Contract(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t;
        Ok(())
    }
}

/// He-normal initialisation for a weight with `fan_in` inputs.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    normal(shape, std, rng)
}

pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Conv weight `[out, in, k, k]` plus zero bias, registered as `{prefix}.w` / `{prefix}.b`.
pub fn init_conv(params: &mut ParamSet, prefix: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) {
    params.insert(format!("{prefix}.w"), he_normal(&[cout, cin, k, k], cin * k * k, rng));
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

/// Linear weight `[out, in]` plus zero bias.
pub fn init_linear(params: &mut ParamSet, prefix: &str, cin: usize, cout: usize, rng: &mut impl Rng) {
    params.insert(format!("{prefix}.w"), he_normal(&[cout, cin], cin, rng));
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
}
