use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::SignalConfig;

/// Architecture and quantizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// ConvNeXt blocks per backbone.
    pub num_blocks: usize,
    /// Depthwise kernel width.
    pub kernel_size: usize,
    /// Backbone width, also used as the pointwise expansion width.
    pub channel_size: usize,
    /// Width of the latent bottleneck and of every codeword.
    pub latent_dim: usize,
    /// Frame-rate reduction between spectra and latents.
    pub down_up_ratio: usize,
    /// Entries per codebook; must be a power of two.
    pub codebook_size: usize,
    /// Number of cascaded quantizer stages (Q).
    pub num_quantizers: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            num_blocks: 8,
            kernel_size: 7,
            channel_size: 512,
            latent_dim: 32,
            down_up_ratio: 8,
            codebook_size: 1024,
            num_quantizers: 3,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_blocks", self.num_blocks),
            ("kernel_size", self.kernel_size),
            ("channel_size", self.channel_size),
            ("latent_dim", self.latent_dim),
            ("down_up_ratio", self.down_up_ratio),
            ("codebook_size", self.codebook_size),
            ("num_quantizers", self.num_quantizers),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("codec.{name} must be positive")));
        }
        if !self.codebook_size.is_power_of_two() || self.codebook_size < 2 {
            return Err(Error::Config(format!(
                "codec.codebook_size {} must be a power of two >= 2",
                self.codebook_size
            )));
        }
        if self.codebook_bits() > 16 {
            return Err(Error::Config("codebooks larger than 2^16 entries are not supported".into()));
        }
        if self.num_quantizers > 255 || self.down_up_ratio > 255 {
            return Err(Error::Config("num_quantizers and down_up_ratio must fit in a byte".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("codec.kernel_size {} must be odd", self.kernel_size)));
        }
        Ok(())
    }

    pub fn codebook_bits(&self) -> u32 {
        self.codebook_size.trailing_zeros()
    }

    /// Latent frames produced for `frames` spectral frames (after edge padding).
    pub fn latent_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.down_up_ratio)
    }
}

/// Bitrate of the token stream in kbit/s:
/// `sample_rate / frame_shift / down_up_ratio * log2(codebook_size) * Q / 1000`.
pub fn bitrate_kbps(codec: &CodecConfig, signal: &SignalConfig) -> f64 {
    let bits_per_frame = codec.codebook_bits() as u64 * codec.num_quantizers as u64;
    let numerator = signal.sample_rate as u64 * bits_per_frame;
    let denominator = (signal.frame_shift * codec.down_up_ratio) as u64;
    numerator as f64 / denominator as f64 / 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bitrate_law() {
        let sig = SignalConfig::default();
        for (q, kbps) in [(1, 1.5), (2, 3.0), (3, 4.5), (4, 6.0), (8, 12.0)] {
            let codec = CodecConfig { num_quantizers: q, ..Default::default() };
            assert_eq!(bitrate_kbps(&codec, &sig), kbps);
        }
    }

    #[test]
    fn validation() {
        assert!(CodecConfig::default().validate().is_ok());
        assert!(CodecConfig { codebook_size: 1000, ..Default::default() }.validate().is_err());
        assert!(CodecConfig { num_quantizers: 0, ..Default::default() }.validate().is_err());
        assert!(CodecConfig { kernel_size: 6, ..Default::default() }.validate().is_err());
        assert_eq!(CodecConfig::default().codebook_bits(), 10);
        assert_eq!(CodecConfig::default().latent_frames(199), 25);
    }
}
