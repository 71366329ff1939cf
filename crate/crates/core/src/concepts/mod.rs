//! Concept inputs: binary masks and their per-resolution pyramids, the
//! copy-paste context builder, a color-threshold segmenter and a synthetic
//! scene generator with exact ground-truth masks.

mod context;
mod mask;
mod scene;

pub use context::copy_paste_context;
pub use mask::{binarize_mask, build_mask_pyramid, threshold_segment, ColorRange, MaskPyramid};
pub use scene::{
    synth_scene, AccessorySpec, Anchor, Color, Scene, SceneSpec, ShapeKind, ShapeSpec, CANVAS,
    SYNTH_VOCABULARY,
};

use crate::codec::{Codec, LatentImage, PromptEmbedding};
use crate::error::{Error, Result};
use crate::numerics::{nn_resize, Tensor};

pub const DEFAULT_REF_WEIGHT: f32 = 3.0;
pub const SELF_WEIGHT: f32 = 1.0;
pub const MAX_WEIGHT: f32 = 8.0;

/// One reference concept: its image, latent, latent-resolution mask,
/// mask weight and prompt.
#[derive(Debug, Clone)]
pub struct ConceptRef {
    pub name: String,
    pub image: Tensor,
    pub latent: LatentImage,
    pub mask: Tensor,
    pub weight: f32,
    pub prompt: PromptEmbedding,
}

impl ConceptRef {
    /// `image_mask` is at image resolution and is resampled onto the latent grid.
    pub fn new(
        name: impl Into<String>,
        image: Tensor,
        image_mask: &Tensor,
        weight: f32,
        prompt: PromptEmbedding,
        codec: &Codec,
    ) -> Result<Self> {
        let name = name.into();
        if !(0.0..=MAX_WEIGHT).contains(&weight) {
            return Err(Error::Config(format!(
                "concept {name:?}: weight {weight} outside [0, {MAX_WEIGHT}]"
            )));
        }
        let (ih, iw) = (image.dims()[1], image.dims()[2]);
        if image_mask.dims() != [ih, iw] {
            return Err(Error::Shape(format!(
                "concept {name:?}: mask {:?} does not match image {ih}×{iw}",
                image_mask.dims()
            )));
        }
        let latent = codec.encode_image(&image)?;
        let mask = nn_resize(&binarize_mask(image_mask, 0.5), latent.height(), latent.width())?;
        Ok(Self {
            name,
            image,
            latent,
            mask,
            weight,
            prompt,
        })
    }

    /// Stable 64-bit key derived from the name, so per-concept random
    /// streams follow the concept rather than its position in a list.
    pub fn noise_key(&self) -> u64 {
        self.name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}
