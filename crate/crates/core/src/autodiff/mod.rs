//! Dense tensors with a reverse-mode tape.
//!
//! Only what the blocks and losses need: matrices, row-wise reductions and a
//! generic gather. Broadcasting is limited to scalar-against-tensor
//! ([`Tape::mul_scalar`]) and an explicit row bias ([`Tape::add_bias`]).

mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, gradient_error, gradient_pairs, relative_error, TapeFn};
pub use scalar::{DType, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
