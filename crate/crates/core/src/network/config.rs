use serde::{Deserialize, Deserializer, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{Result, TensorError};

/// Channel-width preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WidthPreset {
    /// Encoder 64/128/256/512, decoder 64, window 8, 8 heads.
    Full,
    /// Encoder 32/64/128/256, decoder 64, window 4, 4 heads.
    Tiny,
}

impl WidthPreset {
    pub fn encoder_widths(self) -> [usize; 4] {
        match self {
            WidthPreset::Full => [64, 128, 256, 512],
            WidthPreset::Tiny => [32, 64, 128, 256],
        }
    }

    pub fn attention(self) -> AttentionConfig {
        match self {
            WidthPreset::Full => AttentionConfig::default(),
            WidthPreset::Tiny => AttentionConfig {
                channels: 64,
                window_size: 4,
                num_heads: 4,
                ..AttentionConfig::default()
            },
        }
    }
}

/// Every architecture hyperparameter of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ModelConfig {
    pub width_preset: WidthPreset,
    pub num_classes: usize,
    pub input_channels: usize,
    pub use_frh: bool,
    pub use_aux_head: bool,
    pub attention: AttentionConfig,
}

impl ModelConfig {
    pub fn new(width_preset: WidthPreset, num_classes: usize) -> Self {
        ModelConfig {
            width_preset,
            num_classes,
            input_channels: 3,
            use_frh: true,
            use_aux_head: true,
            attention: width_preset.attention(),
        }
    }

    pub fn full(num_classes: usize) -> Self {
        Self::new(WidthPreset::Full, num_classes)
    }

    pub fn tiny(num_classes: usize) -> Self {
        Self::new(WidthPreset::Tiny, num_classes)
    }

    pub fn encoder_widths(&self) -> [usize; 4] {
        self.width_preset.encoder_widths()
    }

    /// Decoder width C, shared by the skip projections and every GLTB.
    pub fn decoder_channels(&self) -> usize {
        self.attention.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(TensorError::invalid(
                "model config",
                format!("num_classes must be in 2..=255, got {}", self.num_classes),
            ));
        }
        if self.input_channels == 0 {
            return Err(TensorError::invalid(
                "model config",
                "input_channels must be positive",
            ));
        }
        self.attention.validate()?;
        if self.use_frh && self.attention.channels < 4 {
            return Err(TensorError::invalid(
                "model config",
                "the refinement head reduces channels by 4; decoder width must be >= 4",
            ));
        }
        Ok(())
    }
}

/// Optional per-field overrides of the preset's attention settings.
#[derive(Clone, Copy, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttentionOverrides {
    channels: Option<usize>,
    window_size: Option<usize>,
    num_heads: Option<usize>,
    cross_window_interaction: Option<bool>,
    include_identity_term: Option<bool>,
    relative_position_bias: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelConfigFile {
    width_preset: WidthPreset,
    num_classes: usize,
    #[serde(default = "default_input_channels")]
    input_channels: usize,
    #[serde(default = "yes")]
    use_frh: bool,
    #[serde(default = "yes")]
    use_aux_head: bool,
    #[serde(default)]
    attention: AttentionOverrides,
}

fn default_input_channels() -> usize {
    3
}

fn yes() -> bool {
    true
}

impl<'de> Deserialize<'de> for ModelConfig {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = ModelConfigFile::deserialize(d)?;
        let base = f.width_preset.attention();
        let o = f.attention;
        Ok(ModelConfig {
            width_preset: f.width_preset,
            num_classes: f.num_classes,
            input_channels: f.input_channels,
            use_frh: f.use_frh,
            use_aux_head: f.use_aux_head,
            attention: AttentionConfig {
                channels: o.channels.unwrap_or(base.channels),
                window_size: o.window_size.unwrap_or(base.window_size),
                num_heads: o.num_heads.unwrap_or(base.num_heads),
                cross_window_interaction: o
                    .cross_window_interaction
                    .unwrap_or(base.cross_window_interaction),
                include_identity_term: o
                    .include_identity_term
                    .unwrap_or(base.include_identity_term),
                relative_position_bias: o
                    .relative_position_bias
                    .unwrap_or(base.relative_position_bias),
            },
        })
    }
}
