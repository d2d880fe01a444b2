//! Anchored truncated diffusion over action chunks.
//!
//! A vocabulary of anchor chunks is clustered from expert demonstrations.
//! At inference each anchor is lightly noised, denoised for a handful of
//! reverse steps conditioned on a learned context, and scored; the best
//! candidate is executed as a chunk, optionally nudged per step by a small
//! bounded residual network. The crate also ships the planar environment the
//! policies are trained in and the experiment harness around it.

mod error;
pub mod harness;
pub mod policy;
pub mod residual;
pub mod schedule;
pub mod seeds;
pub mod simenv;
pub mod vocabulary;

pub use error::{Error, Result};
