use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_BLOCKS: usize = 7;
pub const NUM_LAYERS: usize = 16;
pub const DEFAULT_PSI: [usize; 2] = [5, 6];

/// Topology of the toy U-Net: three encoder blocks, one middle block and
/// three decoder blocks, each made of attention layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub block_layer_counts: Vec<usize>,
    /// Feature-map side length per block, in latent cells.
    pub block_resolutions: Vec<usize>,
    pub base_channels: usize,
    /// Blocks whose self-attention is replaced by MRSA when composing.
    pub psi: BTreeSet<usize>,
    pub head_dim: usize,
    pub text_dim: usize,
    pub latent_channels: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            block_layer_counts: vec![2, 2, 2, 1, 3, 3, 3],
            block_resolutions: vec![16, 8, 4, 4, 4, 8, 16],
            base_channels: 32,
            psi: DEFAULT_PSI.into_iter().collect(),
            head_dim: 32,
            text_dim: 32,
            latent_channels: 4,
            norm_groups: 8,
        }
    }
}

/// Where a self-attention layer sits in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerAddress {
    pub block: usize,
    pub layer_in_block: usize,
    pub global_layer: usize,
}

impl UNetConfig {
    pub fn with_psi(mut self, psi: impl IntoIterator<Item = usize>) -> Self {
        self.psi = psi.into_iter().collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_layer_counts.len() != NUM_BLOCKS || self.block_resolutions.len() != NUM_BLOCKS {
            return Err(Error::Config(format!("the U-Net has exactly {NUM_BLOCKS} blocks")));
        }
        let total: usize = self.block_layer_counts.iter().sum();
        if total != NUM_LAYERS || self.block_layer_counts.contains(&0) {
            return Err(Error::Config(format!(
                "block layer counts {:?} must be positive and sum to {NUM_LAYERS}",
                self.block_layer_counts
            )));
        }
        let r = self.latent_resolution();
        let want = [r, r / 2, r / 4, r / 4, r / 4, r / 2, r];
        if !r.is_multiple_of(4) || self.block_resolutions != want {
            return Err(Error::Config(format!(
                "block resolutions {:?} must follow {want:?}",
                self.block_resolutions
            )));
        }
        if let Some(b) = self.psi.iter().find(|&&b| b >= NUM_BLOCKS) {
            return Err(Error::Config(format!("psi block {b} outside 0..={}", NUM_BLOCKS - 1)));
        }
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(self.norm_groups) || self.head_dim == 0 {
            return Err(Error::Config(format!(
                "base channels {} must be a positive multiple of {} groups",
                self.base_channels, self.norm_groups
            )));
        }
        Ok(())
    }

    pub fn latent_resolution(&self) -> usize {
        self.block_resolutions[0]
    }

    /// Channel width at a given feature resolution.
    pub fn channels_at(&self, res: usize) -> usize {
        self.base_channels * (self.latent_resolution() / res)
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn first_layer_of(&self, block: usize) -> usize {
        self.block_layer_counts[..block].iter().sum()
    }

    pub fn layers_of(&self, block: usize) -> std::ops::Range<usize> {
        let start = self.first_layer_of(block);
        start..start + self.block_layer_counts[block]
    }

    pub fn address(&self, global_layer: usize) -> Result<LayerAddress> {
        (0..NUM_BLOCKS)
            .find(|&b| self.layers_of(b).contains(&global_layer))
            .map(|block| LayerAddress {
                block,
                layer_in_block: global_layer - self.first_layer_of(block),
                global_layer,
            })
            .ok_or_else(|| Error::Input(format!("layer {global_layer} outside 0..{NUM_LAYERS}")))
    }

    pub fn addresses(&self) -> Vec<LayerAddress> {
        (0..NUM_LAYERS).map(|g| self.address(g).expect("in range")).collect()
    }

    /// Global layers whose block is in `psi`, ascending.
    pub fn psi_layers(&self) -> Vec<usize> {
        self.psi.iter().flat_map(|&b| self.layers_of(b)).collect()
    }

    pub fn resolution_of_layer(&self, global_layer: usize) -> Result<usize> {
        Ok(self.block_resolutions[self.address(global_layer)?.block])
    }
}
