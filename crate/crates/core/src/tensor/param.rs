use std::collections::HashMap;

use super::tape::{GradStore, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{ComboError, Result};

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<S: Scalar> {
    pub id: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    /// Whether decoupled weight decay applies to this parameter.
    pub decay: bool,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(id: impl Into<String>, value: Tensor<S>, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            id: id.into(),
            value,
            grad,
            decay,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Ordered collection of parameters with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S: Scalar> {
    params: Vec<Parameter<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, param: Parameter<S>) -> Result<usize> {
        if self.index.contains_key(&param.id) {
            return Err(ComboError::InvalidState(format!(
                "duplicate parameter id {:?}",
                param.id
            )));
        }
        let i = self.params.len();
        self.index.insert(param.id.clone(), i);
        self.params.push(param);
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Parameter<S> {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Parameter<S> {
        &mut self.params[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn by_id(&self, id: &str) -> Option<&Parameter<S>> {
        self.position(id).map(|i| &self.params[i])
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    /// Registers every parameter on `tape`; the returned vars are indexed
    /// like the store.
    pub fn register<'p>(&'p self, tape: &mut Tape<'p, S>) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, &p.value))
            .collect()
    }

    /// Overwrites every `grad` field from `grads`; parameters absent from the
    /// store get exact zeros.
    pub fn set_grads(&mut self, grads: &GradStore<S>) {
        for (i, p) in self.params.iter_mut().enumerate() {
            p.grad = match grads.get(i) {
                Some(g) => g.clone(),
                None => Tensor::zeros(p.value.shape()),
            };
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    id: p.id.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    decay: p.decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_ids_rejected() {
        let mut store = ParamStore::<f64>::new();
        store
            .push(Parameter::new("a", Tensor::zeros(&[2]), false))
            .unwrap();
        assert!(store
            .push(Parameter::new("a", Tensor::zeros(&[3]), false))
            .is_err());
    }

    #[test]
    fn set_grads_zeroes_non_participants() {
        let mut store = ParamStore::<f64>::new();
        store
            .push(Parameter::new("a", Tensor::full(&[2], 1.0), false))
            .unwrap();
        store
            .push(Parameter::new("b", Tensor::full(&[3], 1.0), false))
            .unwrap();
        store.get_mut(1).grad = Tensor::full(&[3], 9.0);
        let grads = {
            let mut tape = Tape::new();
            let vars = store.register(&mut tape);
            let l = tape.sum(vars[0]);
            tape.backward(l).unwrap()
        };
        store.set_grads(&grads);
        assert_eq!(store.get(0).grad.data(), &[1.0, 1.0]);
        assert_eq!(store.get(1).grad.data(), &[0.0, 0.0, 0.0]);
    }
}
