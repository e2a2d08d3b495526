//! Dense arrays and reverse-mode differentiation.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var, RMSNORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
