//! Minimal dense-tensor math for small MLP workloads.
//!
//! Everything is `f64` and row-major. Networks record an explicit [`MlpTape`]
//! on every forward call; the tape is consumed by [`mlp_backward`], which
//! accumulates parameter gradients into a [`ParamStore`] and hands back the
//! gradient with respect to the network input so callers can chain networks.

mod embed;
mod error;
mod gradcheck;
pub mod io;
mod mlp;
mod params;
mod tensor;

pub use embed::sinusoidal_embed;
pub use error::{NumError, Result};
pub use gradcheck::{grad_check, GRAD_CHECK_STEP};
pub use mlp::{mlp_backward, mlp_forward, Activation, Mlp, MlpSpec, MlpTape};
pub use params::{adam_step, AdamConfig, ParamId, ParamStore};
pub use tensor::Tensor2;
