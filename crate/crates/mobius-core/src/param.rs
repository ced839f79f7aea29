//! Named weight tensors with frozen flags and gradient accumulators.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{MobiusError, Result};
use crate::tensor::Tensor;

/// Census tag. Parameters partition into exactly these three groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamTag {
    Spatial,
    Temporal,
    Plumbing,
}

impl ParamTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamTag::Spatial => "spatial",
            ParamTag::Temporal => "temporal",
            ParamTag::Plumbing => "plumbing",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
    /// Gradient accumulator; never allocated while frozen.
    pub grad: Option<Tensor>,
    pub tag: ParamTag,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, tag: ParamTag) -> Self {
        Parameter {
            name: name.into(),
            value,
            frozen: false,
            grad: None,
            tag,
        }
    }
}

/// Gradients keyed by parameter name. Sorted iteration keeps every reduction
/// and update order fixed.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn new() -> Self {
        GradientMap::default()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.grads.insert(name, grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// The model's parameters, keyed by hierarchical name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, p: Parameter) {
        self.params.insert(p.name.clone(), p);
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| MobiusError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| MobiusError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).map(|p| !p.frozen).unwrap_or(false)
    }

    /// Names of all non-frozen parameters, sorted.
    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.params
            .values()
            .filter(|p| !p.frozen)
            .map(|p| p.name.clone())
            .collect()
    }

    /// Add `delta` into the parameter's gradient accumulator. Frozen
    /// parameters are never written; calling this on one is a bug upstream.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        assert!(!p.frozen, "gradient write to frozen parameter {name}");
        match &mut p.grad {
            None => {
                p.grad = Some(delta.clone());
            }
            Some(g) => {
                assert!(g.same_shape(delta));
                let buf = g.make_mut();
                for (a, b) in buf.iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Accumulate a whole gradient map (used by the training loop between
    /// optimizer updates).
    pub fn accumulate(&mut self, grads: &GradientMap) -> Result<()> {
        for (name, g) in grads.iter() {
            self.accumulate_grad(name, g)?;
        }
        Ok(())
    }

    /// Validate that every listed name exists; returns the offenders joined.
    pub fn validate_names<'a>(&self, names: impl Iterator<Item = &'a str>) -> Result<()> {
        let missing: Vec<&str> = names.filter(|n| !self.params.contains_key(*n)).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(MobiusError::UnknownParam(missing.join(", ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_reject_grad_writes() {
        let mut store = ParamStore::new();
        let mut p = Parameter::new("w", Tensor::zeros(&[2]), ParamTag::Spatial);
        p.frozen = true;
        store.insert(p);
        let delta = Tensor::full(&[2], 1.0);
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            store.accumulate_grad("w", &delta)
        }));
        assert!(r.is_err());
    }

    #[test]
    fn accumulate_adds_in_place() {
        let mut store = ParamStore::new();
        store.insert(Parameter::new("w", Tensor::zeros(&[2]), ParamTag::Temporal));
        let delta = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        store.accumulate_grad("w", &delta).unwrap();
        store.accumulate_grad("w", &delta).unwrap();
        let g = store.get("w").unwrap().grad.as_ref().unwrap();
        assert_eq!(g.data(), &[2.0, 4.0]);
    }

    #[test]
    fn validate_names_lists_missing() {
        let store = ParamStore::new();
        let err = store.validate_names(["a", "b"].into_iter()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("a") && msg.contains("b"));
    }
}
