//! Dense `f64` tensors, a reverse-mode tape, and small layer primitives.

mod gradcheck;
mod nn;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradReport};
pub use nn::{Activation, LayerNorm, Linear, MaskedLinear, Mlp};
pub use param::{Param, ParamId, Parameterized};
pub use tape::{sigmoid, softplus, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;
