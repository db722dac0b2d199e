use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Insert or replace a parameter. Insertion order is preserved.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = value;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(value);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Register every parameter as a gradient-tracking leaf of `graph`.
    pub fn bind<'a>(&'a self, graph: &Graph<T>) -> Result<Bound<'a, T>> {
        let vars = self
            .tensors
            .iter()
            .map(|t| graph.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { store: self, vars })
    }

    /// Register every parameter as a constant (inference).
    pub fn bind_frozen<'a>(&'a self, graph: &Graph<T>) -> Result<Bound<'a, T>> {
        let vars = self
            .tensors
            .iter()
            .map(|t| graph.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { store: self, vars })
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replace values from `(name, tensor)` entries; every stored name must be
    /// present with a matching shape.
    pub fn load_entries(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        let lookup: BTreeMap<&str, &Tensor<T>> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = lookup
                .get(name.as_str())
                .ok_or_else(|| AutodiffError::Format(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(AutodiffError::Shape {
                    op: "load_entries",
                    lhs: slot.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *slot = (*t).clone();
        }
        Ok(())
    }
}

/// Parameters registered on a particular graph.
pub struct Bound<'a, T> {
    store: &'a ParamStore<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> Bound<'_, T> {
    /// Graph handle for a parameter; unknown names are a programming error.
    pub fn get(&self, name: &str) -> Var {
        match self.store.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order; parameters the loss did not reach get zeros.
    pub fn grads(&self, graph: &Graph<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(self.store.tensors())
            .map(|(&v, t)| graph.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}
