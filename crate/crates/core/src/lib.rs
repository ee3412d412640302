//! Amplitude/phase spectral neural audio codec with residual vector quantization,
//! two-stage joint/individual training, bitstream tooling, and objective metrics.

pub mod bitstream;
pub mod config;
pub mod data;
pub mod discriminators;
pub mod error;
pub mod frontend;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use frontend::{SignalConfig, SpectralPair};
pub use model::{bitrate_kbps, CodecConfig, CodecModel};
