//! Model hyper-parameters and their validation.

use serde::{Deserialize, Serialize};

/// Architecture hyper-parameters shared by every network in the model.
///
/// The JSON form uses exactly these field names; unknown keys are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Side length of the square input and output images, in pixels.
    pub image_size: usize,
    /// Number of style elements per code (rows of the style code).
    pub style_count: usize,
    /// Width of a single style element.
    pub style_dim: usize,
    /// Attention heads in the style blending module.
    pub heads: usize,
    /// Number of stacked cross-attention layers in the style blending module.
    pub sbm_layers: usize,
    /// Feature pyramid levels tapped from the encoder backbone.
    pub pyramid_levels: usize,
    /// Style decode blocks; block `b` synthesizes resolution `2^(b+2)`.
    pub decoder_blocks: usize,
    /// Identity embedding width.
    pub id_dim: usize,
    /// Facial landmark count.
    pub landmark_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("image_size {0} must be a power of two and at least {MIN_IMAGE_SIZE}")]
    ImageSize(usize),
    #[error("{0} must be nonzero")]
    Zero(&'static str),
    #[error("style_dim {style_dim} is not divisible by heads {heads}")]
    HeadsDoNotDivideDim { style_dim: usize, heads: usize },
    #[error("style_count {style_count} is not divisible by pyramid_levels {pyramid_levels}")]
    LevelsDoNotDivideStyles {
        style_count: usize,
        pyramid_levels: usize,
    },
    #[error("image_size {image_size} must equal 2^(decoder_blocks + 1) = {expected}")]
    DecoderResolution { image_size: usize, expected: usize },
    #[error("style_count {style_count} is too small to feed {decoder_blocks} decoder blocks two elements each")]
    TooFewStyles {
        style_count: usize,
        decoder_blocks: usize,
    },
    #[error("{pyramid_levels} pyramid levels do not fit in a {image_size}px image")]
    PyramidTooDeep {
        pyramid_levels: usize,
        image_size: usize,
    },
}

pub const MIN_IMAGE_SIZE: usize = 16;

impl ModelConfig {
    /// Default configuration for CPU-scale training.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            style_count: 12,
            style_dim: 64,
            heads: 4,
            sbm_layers: 4,
            pyramid_levels: 3,
            decoder_blocks: 5,
            id_dim: 64,
            landmark_count: 19,
            seed: 0,
        }
    }

    /// Full-size preset (18x512 style codes, 1024px synthesis). Only used for shape checks.
    pub fn paper() -> Self {
        Self {
            image_size: 1024,
            style_count: 18,
            style_dim: 512,
            heads: 8,
            sbm_layers: 4,
            pyramid_levels: 3,
            decoder_blocks: 9,
            id_dim: 512,
            landmark_count: 19,
            seed: 0,
        }
    }

    /// Tiny configuration used by gradient checks (16px images).
    pub fn toy() -> Self {
        Self {
            image_size: 16,
            style_count: 6,
            style_dim: 8,
            heads: 2,
            sbm_layers: 2,
            pyramid_levels: 3,
            decoder_blocks: 3,
            id_dim: 8,
            landmark_count: 4,
            seed: 0,
        }
    }

    /// Keeps every field but resizes the image and the decoder depth together.
    pub fn with_image_size(mut self, image_size: usize) -> Self {
        self.image_size = image_size;
        self.decoder_blocks = image_size.max(2).trailing_zeros().saturating_sub(1) as usize;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let zero_checks = [
            ("style_count", self.style_count),
            ("style_dim", self.style_dim),
            ("heads", self.heads),
            ("sbm_layers", self.sbm_layers),
            ("pyramid_levels", self.pyramid_levels),
            ("decoder_blocks", self.decoder_blocks),
            ("id_dim", self.id_dim),
            ("landmark_count", self.landmark_count),
        ];
        for (name, value) in zero_checks {
            if value == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if !self.image_size.is_power_of_two() || self.image_size < MIN_IMAGE_SIZE {
            return Err(ConfigError::ImageSize(self.image_size));
        }
        if self.style_dim % self.heads != 0 {
            return Err(ConfigError::HeadsDoNotDivideDim {
                style_dim: self.style_dim,
                heads: self.heads,
            });
        }
        if self.style_count % self.pyramid_levels != 0 {
            return Err(ConfigError::LevelsDoNotDivideStyles {
                style_count: self.style_count,
                pyramid_levels: self.pyramid_levels,
            });
        }
        let expected = 1usize
            .checked_shl(self.decoder_blocks as u32 + 1)
            .unwrap_or(0);
        if self.image_size != expected {
            return Err(ConfigError::DecoderResolution {
                image_size: self.image_size,
                expected,
            });
        }
        if self.style_count < 2 * self.decoder_blocks {
            return Err(ConfigError::TooFewStyles {
                style_count: self.style_count,
                decoder_blocks: self.decoder_blocks,
            });
        }
        if self.pyramid_levels + 1 > self.image_size.trailing_zeros() as usize {
            return Err(ConfigError::PyramidTooDeep {
                pyramid_levels: self.pyramid_levels,
                image_size: self.image_size,
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.style_dim / self.heads
    }

    /// Style elements produced by each pyramid level.
    pub fn styles_per_level(&self) -> usize {
        self.style_count / self.pyramid_levels
    }

    /// Spatial side of pyramid level `p`, with level 0 the coarsest.
    pub fn pyramid_side(&self, level: usize) -> usize {
        self.image_size >> (self.pyramid_levels + 1 - level)
    }

    /// Output side of decoder block `b` (0-based).
    pub fn block_side(&self, block: usize) -> usize {
        4 << block
    }

    /// Feature width used at a given spatial resolution, shared by the encoder and decoder.
    pub fn channels_at(&self, side: usize) -> usize {
        ((4 * self.image_size) / side).clamp(8, 64)
    }

    /// Width of every feature pyramid level.
    pub fn pyramid_channels(&self) -> usize {
        (self.style_dim / 2).clamp(8, 128)
    }

    /// Style element indices consumed by decoder block `b`. Block 0 absorbs any surplus
    /// beyond two elements per block, keeping coarse blocks on the low indices.
    pub fn block_styles(&self, block: usize) -> std::ops::Range<usize> {
        let surplus = self.style_count - 2 * self.decoder_blocks;
        if block == 0 {
            0..2 + surplus
        } else {
            let start = 2 + surplus + 2 * (block - 1);
            start..start + 2
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}
