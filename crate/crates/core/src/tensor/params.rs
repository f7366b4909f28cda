use std::collections::HashMap;

use super::tape::Grads;
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter '{name}'")));
        }
        self.lookup.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Marks parameters trainable when `pred(name)` holds, frozen otherwise.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (n, t) in self.names.iter().zip(&mut self.tensors) {
            t.requires_grad = pred(n);
            if !t.requires_grad {
                t.grad = None;
            }
        }
    }

    /// Records every parameter on `tape`, in id order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.leaf(t)).collect()
    }

    /// Pulls the gradient of each bound parameter out of `grads`.
    pub fn collect_grads(&self, grads: &mut Grads, vars: &[Var<'_>]) -> Vec<Option<Vec<f64>>> {
        vars.iter().map(|&v| grads.take(v)).collect()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Adds per-parameter gradients (as from [`collect_grads`](Self::collect_grads))
    /// into the stored `grad` buffers of trainable parameters.
    pub fn accumulate(&mut self, grads: &[Option<Vec<f64>>]) {
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            if let (true, Some(g)) = (t.requires_grad, g) {
                let buf = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
                buf.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Plain gradient descent on every trainable parameter holding a gradient.
    pub fn sgd_step(&mut self, lr: f64, grad_scale: f64) {
        for t in &mut self.tensors {
            if !t.requires_grad {
                continue;
            }
            if let Some(g) = t.grad.take() {
                for (p, d) in t.data_mut().iter_mut().zip(&g) {
                    *p -= lr * grad_scale * d;
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}
