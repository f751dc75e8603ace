//! Model geometry: encoder shapes, summarizer depths, and the decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// (height, width) the encoder resizes its input to.
    pub input_resolution: (usize, usize),
    /// Patch side for patch embeds, stride for the conv downsampler.
    pub patch_or_stride: usize,
    /// Query tokens produced by the summarizer (m, n, or k).
    pub token_count: usize,
    pub width: usize,
    /// Summarizer depth: Q-Former layers for the semantic path, resampler
    /// layers otherwise.
    pub resampler_depth: usize,
    pub heads: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_resolution;
        if h == 0 || w == 0 || self.patch_or_stride == 0 {
            return Err(Error::Config("encoder resolution and patch must be positive".into()));
        }
        if h % self.patch_or_stride != 0 || w % self.patch_or_stride != 0 {
            return Err(Error::Config(format!(
                "resolution {h}x{w} not divisible by patch/stride {}",
                self.patch_or_stride
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.input_resolution.0 / self.patch_or_stride,
            self.input_resolution.1 / self.patch_or_stride,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub context_len: usize,
    /// Token/position embedding init scales.
    pub embed_init_std: f64,
    pub pos_init_std: f64,
    /// Share the output head with the token embedding table.
    pub tied_head: bool,
    /// Init std for an untied head.
    pub head_init_std: f64,
    /// Initialize the frozen value/output projections to identity, giving
    /// the untrained decoder a context-copy pathway (the stand-in for a
    /// pretrained LM's ability to surface prompt tokens).
    pub copy_init: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub semantic: EncoderConfig,
    pub semantic_backbone_layers: usize,
    pub low_level: EncoderConfig,
    pub document: EncoderConfig,
    pub lm: LmConfig,
    pub lora: LoraConfig,
    /// Truncated-normal std for weight init.
    pub init_std: f64,
    /// Feed-forward expansion in the summarizer blocks.
    pub ff_mult: usize,
}

impl ModelConfig {
    /// Minutes-scale CPU defaults. Token counts keep the 1:1:2 expert ratio.
    pub fn desk() -> Self {
        ModelConfig {
            semantic: EncoderConfig {
                input_resolution: (32, 32),
                patch_or_stride: 8,
                token_count: 8,
                width: 32,
                resampler_depth: 2,
                heads: 4,
            },
            semantic_backbone_layers: 1,
            low_level: EncoderConfig {
                input_resolution: (64, 64),
                patch_or_stride: 4,
                token_count: 8,
                width: 32,
                resampler_depth: 3,
                heads: 4,
            },
            document: EncoderConfig {
                input_resolution: (128, 128),
                patch_or_stride: 16,
                token_count: 16,
                width: 32,
                resampler_depth: 6,
                heads: 4,
            },
            lm: LmConfig {
                width: 64,
                layers: 4,
                heads: 4,
                ff_mult: 2,
                context_len: 512,
                embed_init_std: 0.25,
                pos_init_std: 0.05,
                tied_head: true,
                head_init_std: 0.25,
                copy_init: true,
            },
            lora: LoraConfig { rank: 8, alpha: 8.0 },
            init_std: 0.02,
            ff_mult: 2,
        }
    }

    /// Reference token geometry: 32 + 32 + 64 query tokens, resolutions
    /// 448 / 256 / 1024, resampler depths 3 and 6, LoRA rank 64. Widths stay
    /// at desk scale; only the token accounting is at reference scale.
    pub fn paper_geometry() -> Self {
        let mut cfg = Self::desk();
        cfg.semantic.input_resolution = (448, 448);
        cfg.semantic.patch_or_stride = 14;
        cfg.semantic.token_count = 32;
        cfg.low_level.input_resolution = (256, 256);
        cfg.low_level.patch_or_stride = 16;
        cfg.low_level.token_count = 32;
        cfg.document.input_resolution = (1024, 1024);
        cfg.document.patch_or_stride = 32;
        cfg.document.token_count = 64;
        cfg.lora = LoraConfig { rank: 64, alpha: 64.0 };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.semantic.validate()?;
        self.low_level.validate()?;
        self.document.validate()?;
        if self.lm.width % self.lm.heads != 0 {
            return Err(Error::Config("LM width not divisible by heads".into()));
        }
        if self.semantic_backbone_layers == 0 || self.lm.layers == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        if self.lora.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        Ok(())
    }
}
