//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built per forward pass. Parameters live in a
//! [`ParamStore`] and enter the tape through [`Tape::param`]; after
//! [`Tape::backward`] their gradients are collected with
//! [`Tape::param_grads`] and applied by [`Adam`].

mod error;
pub mod gradcheck;
pub mod linalg;
mod optim;
mod param;
mod tape;
mod tensor;

pub use error::{NumError, Result};
pub use optim::Adam;
pub use param::{Grads, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{softmax_lastdim, Tensor, MASKED};
