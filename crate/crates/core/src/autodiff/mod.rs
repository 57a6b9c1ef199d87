//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
pub(crate) mod kernels;
mod nn_ops;
mod ops;
mod spatial;
mod tape;

pub use gradcheck::grad_check;
pub use nn_ops::ZERO_ROW;
pub use ops::{gelu_grad_scalar, gelu_scalar};
pub use tape::{Gradients, Tape, Var};

pub use spatial::box_sum_tensor;
