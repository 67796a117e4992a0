//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is the value type: a row-major flat array of `f64` plus a
//! shape, an optional gradient slot, and a `requires_grad` marker. All
//! differentiable computation happens on a [`Tape`]: operations append nodes
//! holding the forward value and a rule for propagating gradients backward,
//! and [`Tape::backward`] replays the recording in reverse. The
//! [`gradcheck`] module verifies tape gradients against central finite
//! differences.

mod gradcheck;
mod tape;

pub use gradcheck::{gradcheck, gradcheck_fn, GradcheckConfig, GradcheckReport};
pub use tape::{Tape, Var};

use crate::rng::Rng;
use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

impl TensorError {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Contract {
            op,
            msg: msg.into(),
        }
    }
}

/// An n-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from flat row-major values; fails unless
    /// `product(shape) == values.len()`.
    pub fn new(values: Vec<f64>, shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(TensorError::contract(
                "Tensor::new",
                format!("shape {shape:?} implies {numel} values, got {}", values.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(&[1], value)
    }

    /// Gaussian init, the convention for every learnable array in this crate.
    pub fn randn(rng: &mut Rng, shape: &[usize], std: f64) -> Self {
        let numel: usize = shape.iter().product();
        let values = (0..numel).map(|_| rng.normal(0.0, std)).collect();
        Tensor {
            shape: shape.to_vec(),
            values,
            requires_grad: false,
            grad: None,
        }
    }

    /// Builder-style `requires_grad` marker.
    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Clear the gradient slot. Gradients accumulate across backward passes
    /// until this is called.
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.values.len());
        match &mut self.grad {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Row-major element accessor for tests and small hand computations.
    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} (dim {dim})");
            flat = flat * dim + ix;
        }
        self.values[flat]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
