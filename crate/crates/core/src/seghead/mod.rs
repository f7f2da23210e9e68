//! Pixel decoder, per-pixel embeddings and the masked-attention query
//! decoder that turns backbone features into proposal masks.

mod decoder;
mod pixel_decoder;

use serde::{Deserialize, Serialize};

pub use decoder::{attention_mask, DecodeOutput, MaskPredictor, QueryDecoder, DECODER_LAYERS};
pub use pixel_decoder::{sine_position_encoding, EncodedFeatures, PixelDecoder, PixelEmbedding};

use crate::error::{invalid, Result};
use crate::numerics::Var;


/// Parameter-name prefix of every head tensor.
pub const PREFIX: &str = "seghead";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegHeadConfig {
    pub n_queries: usize,
    /// Query / per-pixel embedding width.
    pub c_e: usize,
    /// Pixel decoder width.
    pub c_d: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub norm_groups: usize,
}

impl Default for SegHeadConfig {
    fn default() -> Self {
        SegHeadConfig {
            n_queries: 16,
            c_e: 32,
            c_d: 64,
            heads: 4,
            encoder_layers: 3,
            norm_groups: 8,
        }
    }
}

impl SegHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 || self.c_e == 0 || self.c_d == 0 || self.heads == 0 {
            return Err(invalid!("segmentation head sizes must be positive"));
        }
        if !self.c_e.is_multiple_of(self.heads) || !self.c_d.is_multiple_of(self.heads) {
            return Err(invalid!(
                "c_e={} and c_d={} must be divisible by heads={}",
                self.c_e,
                self.c_d,
                self.heads
            ));
        }
        if !self.c_d.is_multiple_of(4) {
            return Err(invalid!("c_d must be a multiple of 4 for 2-D position encodings"));
        }
        Ok(())
    }
}

/// Head outputs for one image. Mask tensors are `[N, H * W]` row-major.
#[derive(Debug, Clone)]
pub struct MaskPrediction {
    pub e_pixel: Var,
    pub mask_logits: Var,
    pub class_logits: Var,
    /// Per decoder layer proposal masks, computed from the layer's input queries.
    pub intermediate: Vec<Var>,
    /// Encoded level (0 = finest) read by each decoder layer, in order.
    pub consumed_levels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub n_queries: usize,
}
