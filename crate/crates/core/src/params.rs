//! Named parameter tensors shared by the correction module and the
//! segmentation model, plus the glue that binds them onto a graph.

use std::collections::HashMap;

use crate::rng::SplitMix64;
use crate::tensor::{Element, Gradients, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

/// Graph handles for one binding of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    lookup: HashMap<String, usize>,
}

impl Bound {
    /// Panics if `name` was never registered; parameter names are fixed by
    /// the model builders, so a miss is a programming error.
    pub fn var(&self, name: &str) -> Var {
        match self.lookup.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Pairs names with vars recorded elsewhere, e.g. gradient-check leaves.
    pub fn from_parts<S: AsRef<str>>(names: &[S], vars: &[Var]) -> Self {
        assert_eq!(names.len(), vars.len());
        let lookup = names.iter().enumerate().map(|(i, n)| (n.as_ref().to_string(), i)).collect();
        Self { vars: vars.to_vec(), lookup }
    }
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, t.with_requires_grad(true)));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    fn bind_with(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut lookup = HashMap::with_capacity(self.entries.len());
        for (i, (name, t)) in self.entries.iter().enumerate() {
            vars.push(if trainable { g.param(t) } else { g.constant(t) });
            lookup.insert(name.clone(), i);
        }
        Bound { vars, lookup }
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.bind_with(g, true)
    }

    /// Records every parameter as a constant; nothing flows back.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        self.bind_with(g, false)
    }

    /// Adds the gradients of one backward pass into each parameter's slot.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients<T>) {
        for ((_, t), &v) in self.entries.iter_mut().zip(&bound.vars) {
            let n = t.numel();
            t.accumulate_grad(&grads.get_or_zeros(v, n));
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    /// Prefixes every name, e.g. to nest one set inside another checkpoint.
    pub fn prefixed(&self, prefix: &str) -> Self {
        Self { entries: self.entries.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())).collect() }
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    pub fn into_entries(self) -> Vec<(String, Tensor<T>)> {
        self.entries
    }
}

/// `U(-1/√fan_in, 1/√fan_in)`, drawn in `f64` then cast.
pub fn fan_in_uniform<T: Element>(shape: &[usize], fan_in: usize, rng: &mut SplitMix64) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.uniform(-bound, bound)))
}
