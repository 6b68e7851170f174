use std::collections::BTreeMap;

use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named trainable tensors. Iteration is sorted by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parameters {
    map: BTreeMap<String, Tensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::ConfigInvalid(format!("duplicate parameter {name}")));
        }
        t.set_requires_grad(true);
        self.map.insert(name, t);
        Ok(())
    }

    /// Zero-mean normal init with standard deviation `std`.
    pub fn insert_randn<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<()> {
        self.insert(name, Tensor::randn(shape.to_vec(), std, rng))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_elements(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.map.values_mut().for_each(Tensor::zero_grad);
    }

    /// Pushes every parameter onto `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        BoundParams {
            vars: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    /// Pushes every parameter as a constant (inference, no gradients).
    pub fn bind_frozen(&self, tape: &Tape) -> BoundParams {
        BoundParams {
            vars: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    /// Accumulates the gradients a backward pass left on `bound` into the
    /// matching parameters.
    pub fn absorb_grads(&mut self, bound: &BoundParams) -> Result<()> {
        for (name, var) in &bound.vars {
            if let (Some(t), Some(g)) = (self.map.get_mut(name), var.grad()) {
                t.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.map
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        let mut p = Self { map };
        p.map.values_mut().for_each(|t| t.set_requires_grad(true));
        p
    }

    /// Fails unless `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &Parameters) -> Result<()> {
        if self.map.len() != other.map.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} tensors vs {} expected",
                other.map.len(),
                self.map.len()
            )));
        }
        for (name, t) in &self.map {
            match other.map.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => {
                    return Err(Error::CheckpointMismatch(format!(
                        "{name}: shape {:?} vs {:?}",
                        o.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::CheckpointMismatch(format!("missing tensor {name}"))),
            }
        }
        Ok(())
    }
}

/// Parameters living on one tape, looked up by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }
}
