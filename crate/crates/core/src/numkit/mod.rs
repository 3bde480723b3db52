//! Dense `f64` tensors, reverse-mode differentiation, optimizers and
//! checkpoints.

pub mod checkpoint;
pub mod gradcheck;
mod lstm;
mod optim;
mod params;
mod tape;
mod tensor;

pub use lstm::{lstm_cell, LstmParams, LstmWeights, GATES};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{ParamId, Parameter, ParameterStore};
pub use tape::{Gradients, SparseMatrix, Tape, Unary, Var};
pub use tensor::Tensor;

/// Vectors with norm at or below this cannot be normalized.
pub const NORM_EPSILON: f64 = 1e-12;
