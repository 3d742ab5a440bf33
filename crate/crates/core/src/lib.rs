//! Controllable hand-image latent diffusion at desk scale.
//!
//! Layering, bottom up: [`tensor`] (dense f64 arrays with reverse-mode
//! gradients), [`backbone`] (frozen denoiser, schedule, sampler),
//! [`control`] (trainable branch, condition encoder, zero convolutions),
//! [`fusion`] (multi-resolution self-attention fusion), [`enhance`]
//! (hand-token tagging and biased cross-attention) and [`metrics`].

pub mod backbone;
pub mod control;
pub mod enhance;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Seed, Tensor, TensorError};
