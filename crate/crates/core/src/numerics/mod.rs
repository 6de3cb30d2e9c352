//! Dense tensors, tape-based reverse-mode differentiation, and the SGD
//! optimizer every other module is built on.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
mod optim;
mod real;
mod store;
mod tape;
mod tensor;

pub use optim::{clip_grad_norm, sgd_step, Sgd};
pub use real::{DType, Real};
pub use store::ParameterStore;
pub use tape::{GradFault, Grads, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
