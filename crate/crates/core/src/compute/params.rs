use std::sync::Arc;

use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors.
///
/// Tensors are reference counted so that many tapes can read them at once;
/// mutation goes through [`ParamSet::get_mut`], which copies on write if a
/// tape still holds a reference.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Arc<Array>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot index.
    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> usize {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, slot: usize) -> &Array {
        &self.values[slot]
    }

    pub fn shared(&self, slot: usize) -> Arc<Array> {
        Arc::clone(&self.values[slot])
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Array {
        Arc::make_mut(&mut self.values[slot])
    }

    pub fn by_name(&self, name: &str) -> Result<&Array> {
        self.index_of(name)
            .map(|i| self.get(i))
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| &**v))
    }

    /// Registers every tensor on the tape as a differentiable leaf; the
    /// returned handles are aligned with slot indices.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(Arc::clone(v))).collect()
    }

    pub fn zeros_like(&self) -> Vec<Array> {
        self.values.iter().map(|v| Array::zeros(v.shape())).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.all_finite())
    }
}
