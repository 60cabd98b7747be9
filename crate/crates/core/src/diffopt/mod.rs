//! Differentiation, optimization and loss weighting shared by all trainable models.

mod adamw;
mod balance;
mod params;
mod tape;
mod tensor;

pub use adamw::{clip_grad_norm, AdamWConfig, AdamWState};
pub use balance::{LossBalancer, TermKind, TermSpec};
pub use params::ParamSet;
pub use tape::{numerical_gradient, relative_error, sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;
