//! Binds named parameter matrices onto a [`Tape`] for one forward/backward pass.

use std::collections::{BTreeMap, HashMap};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::Result;
use crate::tensor::Matrix;

/// Decides which named parameters receive gradients.
pub type Selector<'a> = &'a dyn Fn(&str) -> bool;

pub struct ParamGraph<'a> {
    pub tape: Tape,
    bound: HashMap<String, Var>,
    order: Vec<String>,
    trainable: Selector<'a>,
}

fn all(_: &str) -> bool {
    true
}

fn none(_: &str) -> bool {
    false
}

impl<'a> ParamGraph<'a> {
    pub fn new(trainable: Selector<'a>) -> Self {
        ParamGraph {
            tape: Tape::new(),
            bound: HashMap::new(),
            order: Vec::new(),
            trainable,
        }
    }

    /// Every bound parameter is differentiable.
    pub fn all_trainable() -> ParamGraph<'static> {
        ParamGraph::new(&all)
    }

    /// Nothing is differentiable (evaluation).
    pub fn frozen() -> ParamGraph<'static> {
        ParamGraph::new(&none)
    }

    /// Leaf for parameter `name`, created on first use.
    pub fn bind(&mut self, name: &str, value: &Matrix) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let v = if (self.trainable)(name) {
            self.tape.param(value.clone())
        } else {
            self.tape.constant(value.clone())
        };
        self.bound.insert(name.to_string(), v);
        self.order.push(name.to_string());
        v
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.tape.constant(value)
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        (self.trainable)(name)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.tape.value(v)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.tape.backward(loss)
    }

    /// Gradients of all bound trainable parameters, zero where unreached.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.order
            .iter()
            .filter(|n| (self.trainable)(n))
            .map(|n| (n.clone(), grads.get_or_zeros(self.bound[n])))
            .collect()
    }

    pub fn bound_names(&self) -> &[String] {
        &self.order
    }
}
