//! Architecture hyperparameters and ablation toggles.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Side of the square input frames in pixels.
    pub input_size: usize,
    /// Total encoder downsampling; a power of two.
    pub encoder_stride: usize,
    /// Output channels of each double-convolution block; the last entry is
    /// the feature dimension.
    pub encoder_widths: Vec<usize>,
    /// Channels per group of the encoder normalization; 1 normalizes each
    /// channel on its own.
    pub norm_group_size: usize,
    pub pyramid_levels: usize,
    /// Side of the correlation sampling grid; odd.
    pub kernel: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub coord_embed_width: usize,
    /// Extra transformer passes that resample correlation at the current
    /// estimate. 0 and 1 both mean a single pass.
    pub refinement_iters: usize,
    /// Sliding-window length; 0 processes the whole sequence at once.
    pub window_length: usize,
    /// Add fixed temporal and spatial sinusoids to the tokens.
    pub positional_encoding: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            encoder_stride: 4,
            encoder_widths: vec![16, 32, 64, 32],
            norm_group_size: 1,
            pyramid_levels: 4,
            kernel: 5,
            d_model: 64,
            blocks: 4,
            heads: 4,
            ff_width: 64,
            coord_embed_width: 64,
            refinement_iters: 0,
            window_length: 0,
            positional_encoding: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A reduced network for CPU training runs of a few minutes.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            encoder_widths: vec![8, 16, 16, 16],
            d_model: 32,
            blocks: 2,
            ff_width: 32,
            coord_embed_width: 32,
            ..Self::default()
        }
    }

    pub fn d_feat(&self) -> usize {
        self.encoder_widths.last().copied().unwrap_or(0)
    }

    pub fn correlation_width(&self) -> usize {
        self.pyramid_levels * self.kernel * self.kernel
    }

    pub fn token_input_width(&self) -> usize {
        self.d_feat() + self.correlation_width() + self.coord_embed_width
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / self.encoder_stride
    }

    /// Number of encoder blocks whose first convolution has stride 2.
    pub fn downsampling_blocks(&self) -> usize {
        self.encoder_stride.trailing_zeros() as usize
    }

    /// Transformer passes per forward call.
    pub fn passes(&self) -> usize {
        self.refinement_iters.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.input_size == 0 {
            return bad("input_size must be positive".into());
        }
        if !self.encoder_stride.is_power_of_two() {
            return bad(format!("encoder_stride {} is not a power of two", self.encoder_stride));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return bad("encoder_widths must be non-empty and positive".into());
        }
        if self.downsampling_blocks() >= self.encoder_widths.len() {
            return bad(format!(
                "encoder_stride {} needs more than {} encoder blocks",
                self.encoder_stride,
                self.encoder_widths.len()
            ));
        }
        if self.norm_group_size == 0 || self.encoder_widths.iter().any(|w| w % self.norm_group_size != 0) {
            return bad(format!("encoder widths must be divisible by norm_group_size {}", self.norm_group_size));
        }
        if !self.input_size.is_multiple_of(self.encoder_stride) {
            return bad(format!(
                "input_size {} is not divisible by the encoder stride {}",
                self.input_size, self.encoder_stride
            ));
        }
        if self.pyramid_levels == 0 {
            return bad("pyramid_levels must be positive".into());
        }
        let top = self.feature_size() >> (self.pyramid_levels - 1);
        if top == 0 {
            return bad(format!(
                "feature map of {} px is too small for {} pyramid levels (top level needs at least 1 px)",
                self.feature_size(),
                self.pyramid_levels
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.ff_width == 0 {
            return bad("ff_width must be positive".into());
        }
        if !self.coord_embed_width.is_multiple_of(2) {
            return bad(format!("coord_embed_width {} must be even", self.coord_embed_width));
        }
        if self.window_length == 1 || !self.window_length.is_multiple_of(2) {
            return bad(format!("window_length {} must be 0 or an even number >= 2", self.window_length));
        }
        Ok(())
    }

    /// Hash of the fields that determine the weights and their meaning.
    /// The seed and the inference schedule (refinement, windowing) are
    /// excluded, so one set of weights can be run in every mode.
    pub fn fingerprint(&self) -> u64 {
        let mut s = String::new();
        let _ = write!(
            s,
            "input_size={};encoder_stride={};encoder_widths={:?};norm_group_size={};pyramid_levels={};kernel={};\
             d_model={};blocks={};heads={};ff_width={};coord_embed_width={};positional_encoding={}",
            self.input_size,
            self.encoder_stride,
            self.encoder_widths,
            self.norm_group_size,
            self.pyramid_levels,
            self.kernel,
            self.d_model,
            self.blocks,
            self.heads,
            self.ff_width,
            self.coord_embed_width,
            self.positional_encoding,
        );
        fnv1a(s.as_bytes())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        assert_eq!(ModelConfig::default().correlation_width(), 100);
        assert_eq!(ModelConfig { kernel: 7, ..Default::default() }.correlation_width(), 196);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let d = ModelConfig::default;
        assert!(ModelConfig { window_length: 7, ..d() }.validate().is_err());
        assert!(ModelConfig { window_length: 1, ..d() }.validate().is_err());
        assert!(ModelConfig { kernel: 4, ..d() }.validate().is_err());
        assert!(ModelConfig { input_size: 250, ..d() }.validate().is_err());
        assert!(ModelConfig { input_size: 16, ..d() }.validate().is_err());
        assert!(ModelConfig { coord_embed_width: 63, ..d() }.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_weight_layout() {
        let a = ModelConfig::default();
        assert_eq!(a.fingerprint(), ModelConfig { seed: 9, ..a.clone() }.fingerprint());
        assert_eq!(a.fingerprint(), ModelConfig { refinement_iters: 6, window_length: 8, ..a.clone() }.fingerprint());
        assert_ne!(a.fingerprint(), ModelConfig { kernel: 7, ..a.clone() }.fingerprint());
        assert_ne!(a.fingerprint(), ModelConfig { positional_encoding: true, ..a }.fingerprint());
    }
}
