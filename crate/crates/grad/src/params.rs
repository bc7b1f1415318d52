use std::collections::BTreeMap;

use crate::{GradError, Gradients, Graph, Result, Tensor, Var};

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| GradError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| GradError::UnknownParam(name.to_string()))
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

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// Lazily places parameters on a graph, one leaf per name.
///
/// Names matching a frozen prefix become constants.
pub struct ParamBinder<'p> {
    store: &'p ParamStore,
    frozen: Vec<String>,
    bound: BTreeMap<String, Var>,
}

impl<'p> ParamBinder<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            frozen: Vec::new(),
            bound: BTreeMap::new(),
        }
    }

    /// Treats every parameter whose name starts with `prefix` as a constant.
    pub fn freeze_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.frozen.push(prefix.into());
        self
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.frozen.iter().any(|p| name.starts_with(p.as_str())) {
            g.constant(t)
        } else {
            g.param(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound, trainable parameter, keyed by name.
    pub fn collect(&self, g: &Graph, grads: &Gradients) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if g.requires_grad(v)? {
                out.insert(name.clone(), grads.get(g, v)?);
            }
        }
        Ok(out)
    }
}
