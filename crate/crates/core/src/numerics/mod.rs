//! Dense linear algebra, reverse-mode gradients, parameter stores and
//! optimizers for small models.

mod gradcheck;
mod matrix;
mod optim;
mod params;
mod tape;

pub use gradcheck::finite_diff_check;
pub use matrix::{relu, sigmoid, sigmoid_scalar, softmax, softplus_scalar, Matrix};
pub use optim::{sgd_step, Adam, AdamState};
pub use params::{init_uniform, Bound, Grads, Group, Param, ParamStore};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("data of length {len} cannot fill a {rows}x{cols} matrix")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("{op}: index {index} out of bound {bound}")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("no gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("finite-difference step {0} outside [1e-6, 1e-4]")]
    BadStep(f64),
    #[error("loss function is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("non-finite value in `{0}`")]
    NonFinite(String),
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Self::Shape { op, lhs, rhs }
    }
}

pub type Result<T> = std::result::Result<T, NumericsError>;
