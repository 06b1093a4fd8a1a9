//! Dense `f64` tensors with reverse-mode differentiation, parameter sets,
//! optimizers, checkpoints and a finite-difference verifier.

pub mod checkpoint;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{Optimizer, OptimizerKind};
pub use params::{xavier_uniform, zeros_param, Bound, ParameterSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
