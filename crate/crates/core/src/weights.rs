use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter map. Keys are `layer_id/param_name`, e.g. `up1.attn2/to_k`.
///
/// Iteration order is the sorted key order, which fixes the checkpoint
/// layout and the parameter order seen by the optimizer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelWeights {
    params: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    /// Parameter `param` of layer `layer`.
    pub fn param(&self, layer: &str, param: &str) -> Result<&Tensor> {
        self.get(&format!("{layer}/{param}"))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
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

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Add `grad` into the entry `name`, creating it if absent.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        match self.params.get_mut(name) {
            Some(existing) => {
                *existing = existing.add(grad)?;
            }
            None => {
                self.params.insert(name.to_string(), grad.clone());
            }
        }
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    /// Copy of these weights with every tensor replaced by `f(name, tensor)`.
    pub fn map(&self, mut f: impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<ModelWeights> {
        let mut out = ModelWeights::new();
        for (name, t) in &self.params {
            out.insert(name.clone(), f(name, t)?);
        }
        Ok(out)
    }
}
