//! Toy U-Net noise predictor with a reference (K/V harvesting) mode and a
//! composition (MRSA) mode.

mod config;
mod ops;
mod unet;
mod weights;

pub use config::{LayerAddress, UNetConfig, DEFAULT_PSI, NUM_BLOCKS, NUM_LAYERS};
pub use ops::{conv1x1, conv3x3, gelu, group_norm, layer_norm, silu};
pub use unet::{sinusoidal_embedding, AttentionCapture, ComposeContext, ComposeOutput, Denoiser, KvSource};
pub use weights::{init_weights, layer_plans, LayerPlan, WeightBundle, CONTAINER_MAGIC};

#[cfg(test)]
mod tests;
