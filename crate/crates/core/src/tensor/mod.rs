//! Dense tensors, reverse-mode differentiation, AdamW and the learning-rate
//! schedule.

mod array;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod scalar;
mod schedule;
pub mod shape;

pub use array::Tensor;
pub use gradcheck::{grad_check, Coordinate, GradCheckOptions, GradCheckReport};
pub use graph::{gelu_scalar, softmax_row, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Grads, ParamStore, ParamVars};
pub use scalar::Scalar;
pub use schedule::{cosine_lr, CosineSchedule};

#[cfg(test)]
mod tests;
