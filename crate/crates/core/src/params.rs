//! Named learnable parameters with paired gradient buffers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::volume::Volume5;

/// Registry of named parameters. Each entry pairs a value with a gradient
/// buffer of identical shape. Iteration order is the sorted name order, so
/// optimizer sweeps are deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub value: Volume5,
    pub grad: Volume5,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; the gradient buffer starts at zero.
    pub fn insert(&mut self, name: impl Into<String>, value: Volume5) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::usage(format!("parameter {name} already registered")));
        }
        let grad = Volume5::zeros_like(&value);
        self.entries.insert(name, ParamEntry { value, grad });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&Volume5> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Lookup(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Volume5> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Lookup(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Volume5> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::Lookup(name.to_string()))
    }

    /// Scalar convenience accessor for `(1,1,1,1,1)` parameters.
    pub fn scalar_value(&self, name: &str) -> Result<f64> {
        self.value(name)?.scalar_value()
    }

    /// Adds `delta` into the named gradient buffer.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Volume5) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(name.to_string()))?;
        entry.grad.add_scaled(delta, 1.0)?;
        Ok(())
    }

    /// Sets every gradient element to exactly 0.
    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }
}
