use std::collections::HashMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub frozen: bool,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

/// Per-tape mapping from parameters to the leaves they were recorded as.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Routes parameter `id` to `var` instead, e.g. a probe leaf for
    /// finite-difference checks.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad: None,
            frozen: false,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
        }
    }

    /// Records every parameter on `tape`; frozen ones become constants.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), !p.frozen))
            .collect();
        Binding { vars }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        Binding { vars }
    }

    /// Adds the tape gradients into each trainable parameter's buffer. A
    /// parameter bound on the tape but not reached by the loss receives zeros.
    pub fn accumulate(&mut self, binding: &Binding, grads: &Gradients) {
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            if p.frozen {
                continue;
            }
            let buf = p
                .grad
                .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            if let Some(g) = grads.get(v) {
                buf.add_assign(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.add("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn accumulation_is_additive_until_zeroed() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let b = s.bind(&mut tape);
            let loss = tape.sum(b.var(id));
            let g = tape.backward(loss).unwrap();
            s.accumulate(&b, &g);
        }
        assert_eq!(s.get(id).grad.as_ref().unwrap().data(), &[2.0, 2.0]);
        s.zero_grads();
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut s = ParamStore::new();
        let a = s.add("align.w", Tensor::scalar(3.0)).unwrap();
        let d = s.add("dec.w", Tensor::scalar(4.0)).unwrap();
        s.set_frozen("align.", true);
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let prod = tape.mul(b.var(a), b.var(d)).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        s.accumulate(&b, &g);
        assert!(s.get(a).grad.is_none());
        assert_eq!(s.get(d).grad.as_ref().unwrap().item(), 3.0);
    }
}
