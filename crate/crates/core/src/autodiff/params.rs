use std::collections::HashMap;

use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named, ordered collection of trainable arrays.
///
/// Insertion order is preserved; it fixes the checkpoint layout and the
/// order optimizers visit parameters in.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.position(&name) {
            Some(i) => self.tensors[i] = tensor,
            None => {
                self.names.push(name);
                self.tensors.push(tensor);
            }
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        let i = self.position(name)?;
        self.names.remove(i);
        Some(self.tensors.remove(i))
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::contract("autodiff", format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.position(name).is_some()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// Records every parameter on `tape` as a leaf, keeping each tensor's
    /// `requires_grad` flag.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, |_, t| t.requires_grad())
    }

    /// Records every parameter as a constant; backward never reaches them.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, |_, _| false)
    }

    pub fn bind_with(&self, tape: &mut Tape, trainable: impl Fn(&str, &Tensor) -> bool) -> Bound {
        let vars = self
            .iter()
            .map(|(name, t)| {
                let rg = trainable(name, t);
                let leaf = Tensor::new(t.shape().to_vec(), t.values().to_vec())
                    .expect("parameter shape is consistent")
                    .with_requires_grad(rg);
                (name.to_string(), tape.leaf(leaf))
            })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients recorded for `bound` into each trainable
    /// parameter. Trainable parameters the loss never reached receive a
    /// zero gradient.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (name, tensor) in self.iter_mut() {
            if !tensor.requires_grad() {
                continue;
            }
            let zeros;
            let delta = match bound.vars.get(name).and_then(|&v| grads.get(v)) {
                Some(g) => g,
                None => {
                    zeros = vec![0.0; tensor.numel()];
                    &zeros
                }
            };
            tensor.accumulate_grad(delta)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.clear_grad();
        }
    }

    /// Copies every parameter of `other` whose name also exists here.
    pub fn copy_matching_from(&mut self, other: &ParameterSet) {
        for (name, t) in other.iter() {
            if let Some(mine) = self.get_mut(name) {
                let rg = mine.requires_grad();
                *mine = t.clone().with_requires_grad(rg);
            }
        }
    }

    /// Bitwise equality of values (gradients ignored).
    pub fn values_equal(&self, other: &ParameterSet) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.values()
                        .iter()
                        .zip(b.values())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Largest absolute elementwise difference over parameters present in
    /// both sets.
    pub fn max_abs_diff(&self, other: &ParameterSet) -> f64 {
        let mut worst: f64 = 0.0;
        for (name, t) in self.iter() {
            if let Some(o) = other.get(name) {
                for (a, b) in t.values().iter().zip(o.values()) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        worst
    }
}

/// Tape handles for a bound [`ParameterSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract("autodiff", format!("parameter '{name}' is not bound")))
    }
}

/// Uniform Glorot initialization for a `fan_in×fan_out` weight matrix.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, values)
        .expect("shape matches value count")
        .with_requires_grad(true)
}

pub fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).with_requires_grad(true)
}
