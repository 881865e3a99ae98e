use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transformer stack dimensions shared by both encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Number of stacked attention blocks.
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn validate(&self, which: &str, embed_dim: usize) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config(format!("{which} encoder needs at least one block")));
        }
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "{which} width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if embed_dim > self.width {
            return Err(Error::Config(format!(
                "embedding dimension {embed_dim} exceeds {which} width {}",
                self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionConfig {
    #[serde(flatten)]
    pub encoder: EncoderConfig,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
}

impl VisionConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// Patches plus the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn pixels_per_image(&self) -> usize {
        self.image_height * self.image_width * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextConfig {
    #[serde(flatten)]
    pub encoder: EncoderConfig,
    pub max_len: usize,
    pub vocab_size: usize,
}

/// Full dual-encoder architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub text: TextConfig,
    /// Width of the shared joint embedding space.
    pub embed_dim: usize,
    /// Initial softmax temperature.
    pub temperature: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: width 64, 4 heads, 4 blocks per encoder, 32-d joint
    /// space, 4x4 patches on 16x16 single-channel images, 16-token text.
    pub fn toy(vocab_size: usize) -> Self {
        let encoder = EncoderConfig { depth: 4, width: 64, heads: 4 };
        Self {
            vision: VisionConfig { encoder, image_height: 16, image_width: 16, channels: 1, patch_size: 4 },
            text: TextConfig { encoder, max_len: 16, vocab_size },
            embed_dim: 32,
            temperature: 0.07,
        }
    }

    /// Same layout with a custom per-encoder stack.
    pub fn with_encoder(mut self, encoder: EncoderConfig, embed_dim: usize) -> Self {
        self.vision.encoder = encoder;
        self.text.encoder = encoder;
        self.embed_dim = embed_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        self.vision.encoder.validate("vision", self.embed_dim)?;
        self.text.encoder.validate("text", self.embed_dim)?;
        let v = &self.vision;
        if v.patch_size == 0 || v.channels == 0 || v.image_height == 0 || v.image_width == 0 {
            return Err(Error::Config("image and patch sizes must be positive".into()));
        }
        if v.image_height % v.patch_size != 0 || v.image_width % v.patch_size != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                v.image_height, v.image_width, v.patch_size
            )));
        }
        if self.text.max_len < 3 {
            return Err(Error::Config("text max_len must leave room for BOS, a word and EOS".into()));
        }
        if self.text.vocab_size < 4 {
            return Err(Error::Config("vocabulary must hold the special tokens plus one word".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}
