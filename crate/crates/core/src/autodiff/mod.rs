//! Reverse-mode automatic differentiation over dense `f64` matrices.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use tape::{softmax_in_place, Elementwise, Gradients, Tape, Var};
pub use tensor::{argmax, Tensor};
