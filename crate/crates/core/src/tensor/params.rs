use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered parameter tensors of a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            values: self.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
        }
    }
}

/// Gradient tensors indexed by [`ParamId`], congruent with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    values: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        for (a, b) in self.values[id.0].data_mut().iter_mut().zip(grad.data()) {
            *a += b;
        }
    }

    /// Adds `other` into `self`.
    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(Error::ShapeMismatch {
                op: "Gradients::add_assign",
                left: vec![self.values.len()],
                right: vec![other.values.len()],
            });
        }
        for i in 0..self.values.len() {
            self.accumulate(ParamId(i), &other.values[i]);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            v.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.values.iter().enumerate().map(|(i, v)| (ParamId(i), v))
    }

    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|v| v.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}
