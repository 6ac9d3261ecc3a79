//! Dense `f64` tensors, a reverse-mode autodiff tape, Adam, and the JSON
//! weight snapshot format.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod snapshot;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Numerics, Var};
pub use optim::{adam_step, AdamConfig, AdamState, StepOutcome};
pub use params::{Bound, Grads, ParamSet};
pub use tensor::Tensor;
