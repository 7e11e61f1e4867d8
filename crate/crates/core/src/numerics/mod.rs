//! Minimal 64-bit array engine with reverse-mode differentiation.
//!
//! [`Tape`] records each primitive with what its backward pass needs.
//! Parameters live in a [`ParamStore`] and enter the tape either whole or
//! as a leading-index slice; gradients carry a mask of the elements that
//! were actually reached, which [`Adam`] honours.

pub mod gradcheck;
mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use kernels::{conv1d, conv1d_backward, count_macs, linear, linear_backward};
pub use optim::{ema_update, Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{BatchStats, BnMode, Gradients, ParamGrad, ParamGrads, Tape, Var, NORM_EPS};
pub use tensor::Tensor;
