//! Named parameter collections.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S: Real = f64> {
    pub name: String,
    pub value: Tensor<S>,
    /// Frozen parameters still enter the graph but the optimizer skips them.
    pub trainable: bool,
}

/// Ordered list of uniquely named tensors. Order is insertion order and is
/// the canonical order for gradients, optimizer state and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<S: Real = f64> {
    params: Vec<Param<S>>,
}

impl<S: Real> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) {
        let name = name.into();
        assert!(self.index(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, trainable });
    }

    /// Adds every entry of `other` with `prefix.` prepended.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamSet<S>) {
        for p in other.params {
            self.insert(alloc::format!("{prefix}.{}", p.name), p.value, p.trainable);
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.index(name).map(|i| &self.params[i].value).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        match self.index(name) {
            Some(i) => Ok(&mut self.params[i].value),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn tensors(&self) -> Vec<Tensor<S>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces all values, keeping names and flags.
    pub fn set_tensors(&mut self, values: Vec<Tensor<S>>) {
        assert_eq!(values.len(), self.params.len(), "set_tensors length mismatch");
        for (p, v) in self.params.iter_mut().zip(values) {
            assert_eq!(p.value.shape(), v.shape(), "set_tensors shape mismatch for {}", p.name);
            p.value = v;
        }
    }

    /// Puts every parameter into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<S>) -> Bound {
        Bound {
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            vars: self.params.iter().map(|p| g.leaf(p.value.clone())).collect(),
        }
    }

    /// Names of this set attached to existing handles, e.g. the leaves a
    /// gradient checker created.
    pub fn bound_to(&self, vars: &[Var]) -> Bound {
        assert_eq!(vars.len(), self.params.len(), "bound_to length mismatch");
        Bound { names: self.params.iter().map(|p| p.name.clone()).collect(), vars: vars.to_vec() }
    }

    pub fn cast<T: Real>(&self) -> ParamSet<T> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
        }
    }
}

/// Graph handles of a bound [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Handles whose name starts with `prefix.`, as a view with the prefix removed.
    pub fn scoped(&self, prefix: &str) -> Bound {
        let mut names = Vec::new();
        let mut vars = Vec::new();
        for (n, &v) in self.names.iter().zip(&self.vars) {
            if let Some(rest) = n.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) {
                names.push(rest.to_string());
                vars.push(v);
            }
        }
        Bound { names, vars }
    }
}
