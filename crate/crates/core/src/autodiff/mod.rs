//! Minimal reverse-mode automatic differentiation in double precision.
//!
//! A [`Tape`] records primitives applied to [`Tensor`] values; `backward`
//! sweeps it once in reverse. Parameters live in a [`ParamStore`] and are
//! registered per forward pass, so independent tapes can evaluate the same
//! parameters on different threads.

mod check;
mod optim;
mod params;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_params, relative_error, GradCheckReport};
pub use optim::{clip_grad_norm, optimizer_step, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;
