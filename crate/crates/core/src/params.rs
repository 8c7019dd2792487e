use std::collections::HashSet;

use crate::error::{Result, TfmError};
use crate::tensor::Tensor;

/// Ordered collection of named tensors (model weights, gradients, optimizer moments).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (name, _) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(TfmError::Contract(format!("duplicate parameter name `{name}`")));
            }
        }
        let (names, tensors) = entries.into_iter().unzip();
        Ok(Self { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// The tensors in order, as the parameter slice a model expects.
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.names.into_iter().zip(self.tensors).collect()
    }

    pub fn zeros_like(&self) -> Params {
        Params { names: self.names.clone(), tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Flattens all entries into one vector in order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Checks that `other` has identical names and shapes.
    pub fn ensure_compatible(&self, other: &Params) -> Result<()> {
        if self.len() != other.len() {
            return Err(TfmError::Shape(format!("{} parameters vs {}", self.len(), other.len())));
        }
        for ((a, ta), (b, tb)) in self.iter().zip(other.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(TfmError::Shape(format!("parameter `{a}` {:?} vs `{b}` {:?}", ta.shape(), tb.shape())));
            }
        }
        Ok(())
    }
}
