use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// S=8, N=48, C=512 on a VGG-19 trunk.
    Paper,
    /// S=4, N=8, C=32 on a four-stage shallow trunk; CPU friendly.
    Tiny,
}

/// How the decoder's query tokens are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// Weight vector from the weather encoder mixes the bank (full model).
    #[default]
    Adaptive,
    /// Uniform mixture: trainable queries that ignore the input.
    Static,
    /// Prototype chosen by the image's weather label (requires S = 4).
    Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    /// S: prototypes in the weather bank.
    pub prototypes: usize,
    /// N: tokens per prototype.
    pub tokens: usize,
    /// C: channel width shared by features and queries.
    pub channels: usize,
    pub output_stride: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub ffn_hidden: usize,
    pub crop_size: usize,
    /// 3×3 conv widths per backbone stage; a 2×2 max-pool separates stages.
    pub backbone: Vec<Vec<usize>>,
    /// Hidden widths of the density head; a final 1-channel conv follows.
    pub head_channels: [usize; 2],
    pub query_mode: QueryMode,
    pub bank_init_std: f64,
    pub normalization: Normalization,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            preset: Preset::Paper,
            prototypes: 8,
            tokens: 48,
            channels: 512,
            output_stride: 8,
            decoder_layers: 2,
            decoder_heads: 8,
            ffn_hidden: 2048,
            crop_size: 512,
            // VGG-19 through conv4_4.
            backbone: vec![
                vec![64, 64],
                vec![128, 128],
                vec![256, 256, 256, 256],
                vec![512, 512, 512, 512],
            ],
            head_channels: [256, 128],
            query_mode: QueryMode::Adaptive,
            bank_init_std: 0.02,
            normalization: Normalization::IMAGENET,
        }
    }

    pub fn tiny() -> Self {
        ModelConfig {
            preset: Preset::Tiny,
            prototypes: 4,
            tokens: 8,
            channels: 32,
            output_stride: 8,
            decoder_layers: 1,
            decoder_heads: 1,
            ffn_hidden: 64,
            crop_size: 128,
            backbone: vec![vec![8], vec![16], vec![32], vec![32]],
            head_channels: [16, 8],
            query_mode: QueryMode::Adaptive,
            bank_init_std: 0.02,
            normalization: Normalization::IDENTITY,
        }
    }

    pub fn from_preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self::paper(),
            Preset::Tiny => Self::tiny(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.prototypes == 0 || self.tokens == 0 || self.channels == 0 {
            return fail("prototypes, tokens and channels must be positive".into());
        }
        if self.decoder_heads == 0 || self.channels % self.decoder_heads != 0 {
            return fail(format!(
                "channels ({}) must be divisible by decoder_heads ({})",
                self.channels, self.decoder_heads
            ));
        }
        if self.channels % 4 != 0 {
            return fail(format!(
                "channels ({}) must be divisible by 4 for 2-d positional encodings",
                self.channels
            ));
        }
        if self.backbone.is_empty() || self.backbone.iter().any(Vec::is_empty) {
            return fail("every backbone stage needs at least one conv".into());
        }
        if self.backbone.iter().flatten().any(|&c| c == 0) || self.head_channels.contains(&0) {
            return fail("layer widths must be positive".into());
        }
        let last = *self.backbone.last().and_then(|s| s.last()).expect("checked");
        if last != self.channels {
            return fail(format!(
                "backbone ends at {last} channels but channels = {}",
                self.channels
            ));
        }
        let stride = 1usize << (self.backbone.len() - 1);
        if stride != self.output_stride {
            return fail(format!(
                "{} backbone stages give stride {stride}, config says {}",
                self.backbone.len(),
                self.output_stride
            ));
        }
        if self.crop_size == 0 || self.crop_size % self.output_stride != 0 {
            return fail(format!(
                "crop_size ({}) must be a positive multiple of output_stride ({})",
                self.crop_size, self.output_stride
            ));
        }
        if self.query_mode == QueryMode::Label && self.prototypes != 4 {
            return fail(format!(
                "label-conditioned queries need exactly 4 prototypes, got {}",
                self.prototypes
            ));
        }
        if !(self.bank_init_std > 0.0) {
            return fail("bank_init_std must be positive".into());
        }
        if self.normalization.std.iter().any(|&s| !(s > 0.0)) {
            return fail("normalization std must be positive".into());
        }
        Ok(())
    }
}
