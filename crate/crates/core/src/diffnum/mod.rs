//! Dense `f64` tensors with a reverse-mode gradient tape.
//!
//! The operation set covers what the recurrent and transformer forecasters
//! need: 2-D and batched matrix products, row-wise softmax and layer
//! normalization, pointwise activations, and a handful of reshaping and
//! reduction ops. Every op checks its output for non-finite values and fails
//! with [`DiffError::NonFinite`] instead of letting NaN reach the optimizer.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{finite_diff_check, GradCheckReport, REL_ERROR_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("shape {shape:?} does not describe {len} values")]
    Shape { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Contract(String),
}

impl DiffError {
    pub(crate) fn dimension(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Self::Dimension { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}

/// Pointwise operations addressable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Hadamard,
    Sigmoid,
    Tanh,
    Relu,
}

impl Tape {
    /// Applies a pointwise op; binary ops take two operands, unary ops one.
    pub fn elementwise(&mut self, op: Elementwise, operands: &[Var]) -> Result<Var, DiffError> {
        let arity = match op {
            Elementwise::Add | Elementwise::Hadamard => 2,
            _ => 1,
        };
        if operands.len() != arity {
            return Err(DiffError::Contract(format!("{op:?} takes {arity} operand(s), got {}", operands.len())));
        }
        match op {
            Elementwise::Add => self.add(operands[0], operands[1]),
            Elementwise::Hadamard => self.mul(operands[0], operands[1]),
            Elementwise::Sigmoid => self.sigmoid(operands[0]),
            Elementwise::Tanh => self.tanh(operands[0]),
            Elementwise::Relu => self.relu(operands[0]),
        }
    }
}
