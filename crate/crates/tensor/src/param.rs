use std::collections::BTreeMap;
use std::sync::Arc;

use crate::{Graph, Real, Result, Tensor, TensorError, Var};

/// Named trainable tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    map: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.map.insert(name, Arc::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name).map(|t| t.as_ref())
    }

    /// Copy-on-write access; cheap when no graph still holds the tensor.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.map
            .iter_mut()
            .map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }

    /// Registers every parameter as a differentiable leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        Bound {
            vars: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), graph.param(k, v.clone())))
                .collect(),
        }
    }

    /// Like [`ParamSet::bind`] but as constants: no gradients are tracked.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        Bound {
            vars: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), graph.constant_arc(v.clone())))
                .collect(),
        }
    }
}

/// Parameters bound into one graph.
pub struct Bound<'g, T: Real> {
    vars: BTreeMap<String, Var<'g, T>>,
}

impl<'g, T: Real> Bound<'g, T> {
    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}
