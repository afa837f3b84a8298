//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The tape is define-by-run: every forward call records one node and
//! evaluates it eagerly, `backward` then walks the node list in reverse.
//! A fresh tape is built per training step, which keeps variable-length
//! RNN unrolling trivial. Everything is double precision; the
//! finite-difference checker in [`gradcheck`] relies on that.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckError, GradCheckReport};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use tape::{mm, Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};

use std::fmt;

/// Errors surfaced by tape construction and the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands cannot be combined under the requested op.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand has a shape the op cannot accept.
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        expected: String,
    },
    /// `log` saw a value outside its domain.
    LogNonPositive { value: f64 },
    /// Softmax temperature must be strictly positive.
    NonPositiveTemperature { tau: f64 },
    /// `backward` was called on a non-scalar node.
    NonScalarLoss { shape: Vec<usize> },
    /// An index argument points outside the operand.
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    /// The optimizer was asked to update a parameter with no gradient.
    MissingGradient { param: String },
    /// Optimizer state does not match the parameter set it is applied to.
    StateMismatch { detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::BadShape { op, shape, expected } => {
                write!(f, "{op}: shape {shape:?} not accepted, expected {expected}")
            }
            Error::LogNonPositive { value } => {
                write!(f, "log: non-positive input {value}")
            }
            Error::NonPositiveTemperature { tau } => {
                write!(f, "softmax temperature must be > 0, got {tau}")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::IndexOutOfRange { op, index, bound } => {
                write!(f, "{op}: index {index} out of range (bound {bound})")
            }
            Error::MissingGradient { param } => {
                write!(f, "parameter '{param}' has no gradient")
            }
            Error::StateMismatch { detail } => {
                write!(f, "optimizer state mismatch: {detail}")
            }
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
