//! Named parameter tensors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Included in the weight-decay penalty.
    pub decay: bool,
}

/// Parameters in a fixed registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor, decay: bool) {
        let name = name.into();
        debug_assert!(self.position(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, decay });
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.params[i].value)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Sum of squared entries over the decayed parameters.
    pub fn decay_sum_squares(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.decay)
            .map(|p| p.value.sum_squares())
            .sum()
    }

    /// Replaces every value from `other`, which must have the same names and
    /// shapes in the same order.
    pub fn assign(&mut self, other: Vec<(String, Tensor)>) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for (p, (name, value)) in self.params.iter_mut().zip(other) {
            if p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}{:?} does not match {}{:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok(())
    }
}

/// Uniform in `±1/√fan_in`.
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(&[rows, cols], data).expect("matrix shape")
}

/// A stack of `batch` identity matrices of side `n` plus uniform `±noise`.
pub fn noisy_identity(rng: &mut ChaCha8Rng, batch: usize, n: usize, noise: f64) -> Tensor {
    let mut t = Tensor::eye_stack(batch, n);
    if noise > 0.0 {
        for x in t.data_mut() {
            *x += rng.random_range(-noise..noise);
        }
    }
    t
}
