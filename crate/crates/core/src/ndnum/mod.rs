//! Dense tensors with a define-by-run reverse-mode tape.
//!
//! Every value lives on a [`Tape`] as a node; ops return [`Var`] handles.
//! Gradients are collected by [`Tape::backward`] into a [`Gradients`] table,
//! which is also where leaf gradients are read back from.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{BinaryKind, Extreme, Gradients, Tape, UnaryKind, Var};
pub use tensor::{broadcast_shape, Tensor};

#[cfg(test)]
mod tests;
