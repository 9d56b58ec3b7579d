use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::DataMode;
use crate::error::{Result, TltError};

/// Architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Switching heads, bilinear fusion and conditional-query attention.
    Tlt,
    /// No switching: treatment and label enter heads by concatenation.
    CvaePrime,
    /// Switching heads without fusion or attention.
    CevaePrime,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Tlt => "tlt",
            Variant::CvaePrime => "cvae_prime",
            Variant::CevaePrime => "cevae_prime",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tlt" => Ok(Variant::Tlt),
            "cvae_prime" => Ok(Variant::CvaePrime),
            "cevae_prime" => Ok(Variant::CevaePrime),
            other => Err(TltError::Config(format!("unknown model variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// What the posterior heads read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorInput {
    /// Pooled attention output only.
    Attention,
    /// Pooled attention output concatenated with the pooled fused map.
    AttentionAndFused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub mode: DataMode,
    pub num_classes: usize,
    pub latent_dim: usize,
    /// Image height and width; both 1 in tabular mode.
    pub height: usize,
    pub width: usize,
    /// Image channels, or the feature count in tabular mode.
    pub input_channels: usize,
    /// Residual block widths (image) or `[hidden, feature]` widths (tabular).
    pub channels: Vec<usize>,
    pub head_hidden: usize,
    pub attention_heads: usize,
    pub key_dim: usize,
    /// Widths of the reconstruction network (image: three upsampling stages;
    /// tabular: one hidden layer).
    pub decoder_channels: Vec<usize>,
    pub posterior_input: PosteriorInput,
    /// At evaluation, mix the two outcome arms by `q(t|x)` instead of
    /// thresholding it.
    pub soft_treatment: bool,
    pub precision: Precision,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale image configuration: three residual blocks 32-64-64 with a
    /// final grid of `height/4 x width/4`.
    pub fn image(height: usize, width: usize, channels: usize) -> Self {
        Self {
            variant: Variant::Tlt,
            mode: DataMode::Image,
            num_classes: 2,
            latent_dim: 16,
            height,
            width,
            input_channels: channels,
            channels: vec![32, 64, 64],
            head_hidden: 64,
            attention_heads: 1,
            key_dim: 32,
            decoder_channels: vec![32, 16, 16],
            posterior_input: PosteriorInput::Attention,
            soft_treatment: false,
            precision: Precision::F32,
            seed: 0,
        }
    }

    pub fn tabular(features: usize) -> Self {
        Self {
            mode: DataMode::Tabular,
            height: 1,
            width: 1,
            input_channels: features,
            channels: vec![64, 64],
            latent_dim: 4,
            key_dim: 16,
            decoder_channels: vec![64],
            ..Self::image(1, 1, features)
        }
    }

    /// Tiny double-precision image model for derivative checks.
    pub fn micro() -> Self {
        Self {
            latent_dim: 3,
            channels: vec![4, 6, 6],
            head_hidden: 6,
            key_dim: 4,
            decoder_channels: vec![4, 4, 3],
            precision: Precision::F64,
            ..Self::image(8, 8, 1)
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    /// Width of the encoder's final feature map.
    pub fn feature_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    /// Spatial side of the encoder output grid.
    pub fn grid(&self) -> (usize, usize) {
        match self.mode {
            DataMode::Image => (self.height / 4, self.width / 4),
            DataMode::Tabular => (1, 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TltError::Config(m));
        if self.latent_dim < 1 {
            return bad("latent_dim must be >= 1".into());
        }
        if self.key_dim < 1 {
            return bad("key_dim must be >= 1".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2".into());
        }
        if self.input_channels == 0 || self.head_hidden == 0 {
            return bad("input_channels and head_hidden must be positive".into());
        }
        if self.channels.contains(&0) || self.decoder_channels.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if self.attention_heads == 0
            || !self.key_dim.is_multiple_of(self.attention_heads)
            || !self.feature_channels().is_multiple_of(self.attention_heads)
        {
            return bad(format!(
                "{} attention heads must divide key_dim {} and feature width {}",
                self.attention_heads,
                self.key_dim,
                self.feature_channels()
            ));
        }
        match self.mode {
            DataMode::Image => {
                if self.channels.len() != 3 || self.decoder_channels.len() != 3 {
                    return bad("image models need 3 encoder and 3 decoder widths".into());
                }
                if self.height < 4 || self.width < 4 || !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
                    return bad(format!(
                        "image size {}x{} must be a positive multiple of 4",
                        self.height, self.width
                    ));
                }
            }
            DataMode::Tabular => {
                if self.channels.len() != 2 || self.decoder_channels.len() != 1 {
                    return bad("tabular models need 2 encoder widths and 1 decoder width".into());
                }
            }
        }
        Ok(())
    }
}
