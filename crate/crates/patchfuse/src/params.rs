//! Parameter registration shared by every learnable module.
//!
//! Parameters live as plain [`Tensor`]s between steps. Each forward pass
//! stages them onto a fresh [`Tape`] through a [`Stager`], which records the
//! `name -> Var` binding so the training loop can read gradients back out
//! and the gradient checker can substitute a probe tensor for any single
//! parameter by name.

use crate::tensor::{Tape, Tensor, Var};

pub struct Stager<'a> {
    tape: &'a mut Tape,
    bound: Vec<(String, Var)>,
    substitute: Option<(&'a str, Var)>,
}

impl<'a> Stager<'a> {
    pub fn new(tape: &'a mut Tape) -> Self {
        Stager {
            tape,
            bound: Vec::new(),
            substitute: None,
        }
    }

    /// Stage with one parameter replaced by an existing tape var. Used by
    /// gradcheck to differentiate with respect to a single named parameter.
    pub fn with_substitute(tape: &'a mut Tape, name: &'a str, var: Var) -> Self {
        Stager {
            tape,
            bound: Vec::new(),
            substitute: Some((name, var)),
        }
    }

    /// Register a learnable tensor under `name` and return its tape handle.
    pub fn param(&mut self, name: String, tensor: &Tensor) -> Var {
        let var = match self.substitute {
            Some((target, var)) if target == name => var,
            _ => self.tape.leaf(tensor.clone().requires_grad(true)),
        };
        self.bound.push((name, var));
        var
    }

    pub fn tape(&mut self) -> &mut Tape {
        self.tape
    }

    /// All bindings registered so far, in registration order.
    pub fn into_bindings(self) -> Vec<(String, Var)> {
        self.bound
    }
}
