//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, thiserror::Error)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

/// Generator (and discriminator) architecture configuration.
///
/// `width_mult` scales every channel width, allowing desk-scale models
/// that exercise the full architecture at a fraction of the cost.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Base patch size of the channel-fusion token projection.
    pub patch: usize,
    /// Encoder channel widths before the width multiplier.
    pub base_channels: [usize; 4],
    /// Attention heads in both transformers.
    pub heads: usize,
    /// Transformer layers in both transformers.
    pub layers: usize,
    /// Square input side length.
    pub side: usize,
    /// Channel width multiplier in (0, 1].
    pub width_mult: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            patch: 32,
            base_channels: [64, 128, 256, 512],
            heads: 4,
            layers: 4,
            side: 256,
            width_mult: 1.0,
        }
    }
}

impl GeneratorConfig {
    /// Channel widths after the width multiplier.
    pub fn channels(&self) -> [usize; 4] {
        let mut c = [0usize; 4];
        for (slot, &base) in c.iter_mut().zip(&self.base_channels) {
            *slot = ((base as f64 * self.width_mult).round() as usize).max(1);
        }
        c
    }

    /// Total concatenated channel width across the four scales.
    pub fn channel_sum(&self) -> usize {
        self.channels().iter().sum()
    }

    /// Tokens per scale in the channel-fusion transformer: (side/patch)^2.
    pub fn fusion_tokens(&self) -> usize {
        let g = self.side / self.patch;
        g * g
    }

    /// Tokens in the bottleneck transformer: (side/16)^2.
    pub fn bottleneck_tokens(&self) -> usize {
        let g = self.side / 16;
        g * g
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.width_mult > 0.0 && self.width_mult <= 1.0) {
            return Err(ConfigError(format!(
                "width_mult {} outside (0, 1]",
                self.width_mult
            )));
        }
        if self.side == 0 || self.side % 16 != 0 {
            return Err(ConfigError(format!(
                "side {} must be a positive multiple of 16",
                self.side
            )));
        }
        if !self.patch.is_power_of_two() || self.patch < 8 {
            return Err(ConfigError(format!(
                "patch {} must be a power of two >= 8",
                self.patch
            )));
        }
        if self.side % self.patch != 0 {
            return Err(ConfigError(format!(
                "side {} not divisible by patch {}",
                self.side, self.patch
            )));
        }
        if self.heads == 0 || self.layers == 0 {
            return Err(ConfigError("heads and layers must be positive".into()));
        }
        let c = self.channels();
        if c.iter().any(|&w| w == 0) {
            return Err(ConfigError("zero channel width after multiplier".into()));
        }
        if c[3] % self.heads != 0 {
            return Err(ConfigError(format!(
                "bottleneck width {} not divisible by {} heads",
                c[3], self.heads
            )));
        }
        Ok(())
    }
}
