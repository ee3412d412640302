//! `.apc` token bitstream: a fixed 22-byte little-endian header followed by the
//! token indices packed MSB-first at `codebook_bits` each, frame-major then stage.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::frontend::SignalConfig;
use crate::model::{CodecConfig, TokenSequence};

pub const MAGIC: [u8; 4] = *b"APC+";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BitstreamHeader {
    pub sample_rate: u32,
    pub frame_shift: u16,
    pub down_up_ratio: u8,
    pub num_quantizers: u8,
    pub codebook_bits: u8,
    pub latent_frames: u32,
    pub original_samples: u32,
}

/// Latent frames produced for a clip of `samples` samples.
pub fn latent_frames_for(samples: u64, frame_shift: u64, ratio: u64) -> u64 {
    samples.div_ceil(frame_shift).div_ceil(ratio)
}

impl BitstreamHeader {
    pub fn new(signal: &SignalConfig, codec: &CodecConfig, latent_frames: usize, original_samples: usize) -> Result<Self> {
        let narrow = |v: usize, what: &str, max: u64| -> Result<u64> {
            if v as u64 > max {
                Err(Error::invalid(format!("{what} {v} does not fit in the bitstream header")))
            } else {
                Ok(v as u64)
            }
        };
        let h = Self {
            sample_rate: signal.sample_rate,
            frame_shift: narrow(signal.frame_shift, "frame_shift", u16::MAX as u64)? as u16,
            down_up_ratio: narrow(codec.down_up_ratio, "down_up_ratio", u8::MAX as u64)? as u8,
            num_quantizers: narrow(codec.num_quantizers, "num_quantizers", u8::MAX as u64)? as u8,
            codebook_bits: codec.codebook_bits() as u8,
            latent_frames: narrow(latent_frames, "latent_frames", u32::MAX as u64)? as u32,
            original_samples: narrow(original_samples, "original_samples", u32::MAX as u64)? as u32,
        };
        h.validate().map_err(|e| match e {
            Error::Corruption(m) => Error::InvalidInput(m),
            other => other,
        })?;
        Ok(h)
    }

    fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.frame_shift == 0 || self.down_up_ratio == 0 {
            return Err(Error::Corruption("header has a zero rate, shift, or ratio".into()));
        }
        if self.num_quantizers == 0 || !(1..=16).contains(&self.codebook_bits) {
            return Err(Error::Corruption(format!(
                "header has {} quantizers of {} bits",
                self.num_quantizers, self.codebook_bits
            )));
        }
        let expected = latent_frames_for(
            self.original_samples as u64,
            self.frame_shift as u64,
            self.down_up_ratio as u64,
        );
        if expected != self.latent_frames as u64 {
            return Err(Error::Corruption(format!(
                "{} samples imply {expected} latent frames, header says {}",
                self.original_samples, self.latent_frames
            )));
        }
        Ok(())
    }

    pub fn payload_bits(&self) -> u64 {
        self.latent_frames as u64 * self.num_quantizers as u64 * self.codebook_bits as u64
    }

    pub fn payload_bytes(&self) -> usize {
        self.payload_bits().div_ceil(8) as usize
    }

    pub fn bitrate_kbps(&self) -> f64 {
        let num = self.sample_rate as u64 * self.codebook_bits as u64 * self.num_quantizers as u64;
        let den = self.frame_shift as u64 * self.down_up_ratio as u64;
        num as f64 / den as f64 / 1000.0
    }

    pub fn duration_seconds(&self) -> f64 {
        self.original_samples as f64 / self.sample_rate as f64
    }

    /// Whether this stream can be decoded by a model with these configs.
    pub fn check_compatible(&self, signal: &SignalConfig, codec: &CodecConfig) -> Result<()> {
        let ok = self.sample_rate == signal.sample_rate
            && self.frame_shift as usize == signal.frame_shift
            && self.down_up_ratio as usize == codec.down_up_ratio
            && self.num_quantizers as usize == codec.num_quantizers
            && self.codebook_bits as u32 == codec.codebook_bits();
        if ok {
            Ok(())
        } else {
            Err(Error::Incompatible(format!(
                "bitstream ({} Hz, shift {}, ratio {}, Q={}, {} bits) does not match the model",
                self.sample_rate, self.frame_shift, self.down_up_ratio, self.num_quantizers, self.codebook_bits
            )))
        }
    }

    fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4] = VERSION;
        b[5..9].copy_from_slice(&self.sample_rate.to_le_bytes());
        b[9..11].copy_from_slice(&self.frame_shift.to_le_bytes());
        b[11] = self.down_up_ratio;
        b[12] = self.num_quantizers;
        b[13] = self.codebook_bits;
        b[14..18].copy_from_slice(&self.latent_frames.to_le_bytes());
        b[18..22].copy_from_slice(&self.original_samples.to_le_bytes());
        b
    }

    /// Parses and validates the header at the start of `bytes`.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 {
            if bytes.len() >= 4 && bytes[0..4] != MAGIC {
                return Err(Error::BadMagic {
                    expected: MAGIC,
                    found: bytes[0..4].try_into().expect("four bytes"),
                });
            }
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: bytes[0..4].try_into().expect("four bytes"),
            });
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion {
                found: bytes[4] as u32,
                supported: VERSION as u32,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("four bytes"));
        let h = Self {
            sample_rate: u32_at(5),
            frame_shift: u16::from_le_bytes([bytes[9], bytes[10]]),
            down_up_ratio: bytes[11],
            num_quantizers: bytes[12],
            codebook_bits: bytes[13],
            latent_frames: u32_at(14),
            original_samples: u32_at(18),
        };
        h.validate()?;
        Ok(h)
    }
}

/// Header plus packed payload.
pub fn pack(tokens: &TokenSequence, header: &BitstreamHeader) -> Result<Vec<u8>> {
    header.validate().map_err(|e| Error::invalid(e.to_string()))?;
    if tokens.frames() != header.latent_frames as usize || tokens.num_quantizers() != header.num_quantizers as usize {
        return Err(Error::invalid(format!(
            "tokens are {}x{}, header declares {}x{}",
            tokens.frames(),
            tokens.num_quantizers(),
            header.latent_frames,
            header.num_quantizers
        )));
    }
    let bits = header.codebook_bits as u32;
    tokens
        .check_bounds(1usize << bits)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + header.payload_bytes());
    out.extend_from_slice(&header.to_bytes());
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for &idx in tokens.indices() {
        acc = (acc << bits) | idx as u64;
        filled += bits;
        while filled >= 8 {
            filled -= 8;
            out.push((acc >> filled) as u8);
        }
        acc &= (1u64 << filled) - 1;
    }
    if filled > 0 {
        out.push((acc << (8 - filled)) as u8);
    }
    debug_assert_eq!(out.len(), HEADER_LEN + header.payload_bytes());
    Ok(out)
}

/// Parses a complete bitstream. Any length other than header plus declared payload is an error.
pub fn unpack(bytes: &[u8]) -> Result<(TokenSequence, BitstreamHeader)> {
    let header = BitstreamHeader::parse(bytes)?;
    let expected = HEADER_LEN + header.payload_bytes();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after a {expected}-byte bitstream",
            bytes.len() - expected
        )));
    }
    let bits = header.codebook_bits as u32;
    let count = header.latent_frames as usize * header.num_quantizers as usize;
    let mut indices = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut avail = 0u32;
    let mut payload = bytes[HEADER_LEN..].iter();
    for _ in 0..count {
        while avail < bits {
            let byte = *payload.next().expect("payload length checked above");
            acc = (acc << 8) | byte as u64;
            avail += 8;
        }
        avail -= bits;
        indices.push(((acc >> avail) & ((1u64 << bits) - 1)) as u32);
        acc &= (1u64 << avail) - 1;
    }
    let tokens = TokenSequence::new(header.latent_frames as usize, header.num_quantizers as usize, indices)?;
    Ok((tokens, header))
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn read_file(path: &Path) -> Result<(TokenSequence, BitstreamHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    unpack(&bytes)
}
