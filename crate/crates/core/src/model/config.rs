use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Toy,
}

/// How a skip feature is joined to the decoder state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    Temporal,
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Trilinear,
    TransposeConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    None,
    Concat,
    Bilinear,
}

impl std::str::FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "concat" => Ok(Self::Concat),
            "bilinear" => Ok(Self::Bilinear),
            other => Err(format!("unknown fusion mode '{other}' (expected none, concat or bilinear)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Frames per clip, `T0`.
    pub clip_len: usize,
    pub height: usize,
    pub width: usize,
    pub encoder_widths: [usize; 4],
    pub decoder_widths: [usize; 5],
    pub use_hierarchy: bool,
    pub skip_mode: SkipMode,
    pub upsample_mode: UpsampleMode,
    pub fusion_mode: FusionMode,
    /// Channel width of the audio features; must equal the last encoder width
    /// when fusion is enabled.
    pub audio_channels: usize,
    /// Samples the per-clip waveform is resampled to before the audio branch.
    pub audio_len: usize,
    /// Max-pool window applied to X4 before the bilinear fusion.
    pub fusion_pool: [usize; 3],
}

/// Waveforms are resampled to a multiple of this so the audio stack ends at 3 bins.
pub const AUDIO_LEN_QUANTUM: usize = 384;

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            clip_len: 32,
            height: 224,
            width: 384,
            encoder_widths: [192, 480, 832, 1024],
            decoder_widths: [832, 480, 192, 64, 32],
            use_hierarchy: true,
            skip_mode: SkipMode::Temporal,
            upsample_mode: UpsampleMode::Trilinear,
            fusion_mode: FusionMode::None,
            audio_channels: 1024,
            audio_len: 2 * AUDIO_LEN_QUANTUM,
            fusion_pool: [2, 7, 6],
        }
    }

    pub fn toy() -> Self {
        Self {
            preset: Preset::Toy,
            clip_len: 8,
            height: 32,
            width: 64,
            encoder_widths: [8, 12, 16, 16],
            decoder_widths: [16, 12, 8, 8, 8],
            use_hierarchy: true,
            skip_mode: SkipMode::Temporal,
            upsample_mode: UpsampleMode::Trilinear,
            fusion_mode: FusionMode::None,
            audio_channels: 16,
            audio_len: 2 * AUDIO_LEN_QUANTUM,
            fusion_pool: [1, 1, 1],
        }
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self::paper(),
            Preset::Toy => Self::toy(),
        }
    }

    pub fn clip_shape(&self) -> [usize; 4] {
        [3, self.clip_len, self.height, self.width]
    }

    /// `[C4, T0/8, H0/32, W0/32]`.
    pub fn x4_shape(&self) -> [usize; 4] {
        [self.encoder_widths[3], self.clip_len / 8, self.height / 32, self.width / 32]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.clip_len == 0 || self.clip_len % 8 != 0 {
            return bad(format!("clip_len must be a positive multiple of 8, got {}", self.clip_len));
        }
        if self.height == 0 || self.height % 32 != 0 || self.width == 0 || self.width % 32 != 0 {
            return bad(format!(
                "height and width must be positive multiples of 32, got {}x{}",
                self.height, self.width
            ));
        }
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|&w| w == 0) {
            return bad("channel widths must be at least 1".into());
        }
        if self.fusion_mode != FusionMode::None {
            if self.audio_channels != self.encoder_widths[3] {
                return bad(format!(
                    "audio_channels ({}) must equal the last encoder width ({}) when fusion is enabled",
                    self.audio_channels, self.encoder_widths[3]
                ));
            }
            if self.audio_len == 0 || self.audio_len % AUDIO_LEN_QUANTUM != 0 {
                return bad(format!(
                    "audio_len must be a positive multiple of {AUDIO_LEN_QUANTUM}, got {}",
                    self.audio_len
                ));
            }
        }
        if self.fusion_mode == FusionMode::Bilinear {
            let x4 = self.x4_shape();
            let fits = self.fusion_pool.iter().zip(&x4[1..]).all(|(&k, &d)| k >= 1 && k <= d);
            if !fits {
                return bad(format!(
                    "fusion_pool {:?} must lie within X4 extent {:?}",
                    self.fusion_pool,
                    &x4[1..]
                ));
            }
        }
        Ok(())
    }
}
