//! Encoder, residual vector quantizer, and decoder.

pub mod codec;
pub mod config;
pub mod quantizer;

pub use codec::{CodecModel, Decoder, EncodedUtterance, Encoder};
pub use config::{bitrate_kbps, CodecConfig};
pub use quantizer::{
    dequantize, nearest_codeword, quantize, CodebookEma, Codebooks, LatentSequence, QuantizeOutput,
    TokenSequence,
};
