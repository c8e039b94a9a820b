//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Calling
//! [`Tape::backward`] on a scalar result walks the record in reverse and
//! returns [`Gradients`] for each trainable leaf. Gradients accumulate when a
//! value is used more than once.

mod tape;
mod tensor;

pub use tape::{sigmoid, ElementwiseOp, Gradients, Reduction, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
