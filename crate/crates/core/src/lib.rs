//! Multi-concept image composition on a toy latent-diffusion engine.
//!
//! A reference path noises each concept image and records the self-attention
//! keys and values of a seeded U-Net; a composition path denoises the target
//! latent with multi-reference self-attention over those features, scaled per
//! concept by a weighted mask.

pub mod attention;
pub mod codec;
pub mod concepts;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod numerics;
pub mod pipeline;
pub mod registry;

pub use error::{Error, Result};
