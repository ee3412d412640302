//! STFT and inverse STFT as tensor programs, so gradients reach the generator
//! through the synthesized waveform.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::frontend::{hann_window, SignalConfig};

/// Inverse STFT with the same framing as [`crate::frontend::Stft::synthesize`].
#[derive(Debug, Clone)]
pub struct DiffIstft {
    cfg: SignalConfig,
    cos_basis: Tensor,
    sin_basis: Tensor,
}

impl DiffIstft {
    pub fn new(cfg: SignalConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let bins = cfg.num_bins();
        let n_fft = cfg.fft_size as f64;
        let win = hann_window(cfg.frame_length);
        let mut cos_b = vec![0.0f64; bins * cfg.frame_length];
        let mut sin_b = vec![0.0f64; bins * cfg.frame_length];
        for k in 0..bins {
            let weight = if k == 0 || k == bins - 1 { 1.0 } else { 2.0 };
            let edge = k == 0 || k == bins - 1;
            for n in 0..cfg.frame_length {
                let ang = 2.0 * PI * (k * n) as f64 / n_fft;
                cos_b[k * cfg.frame_length + n] = weight * ang.cos() / n_fft * win[n];
                if !edge {
                    sin_b[k * cfg.frame_length + n] = -weight * ang.sin() / n_fft * win[n];
                }
            }
        }
        Ok(Self {
            cfg,
            cos_basis: Tensor::from_vec(cos_b, (bins, cfg.frame_length), device)?.to_dtype(dtype)?,
            sin_basis: Tensor::from_vec(sin_b, (bins, cfg.frame_length), device)?.to_dtype(dtype)?,
        })
    }

    fn inverse_envelope(&self, frames: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        let cfg = &self.cfg;
        let win = hann_window(cfg.frame_length);
        let len = frames * cfg.frame_shift;
        let half = cfg.frame_length / 2;
        let mut env = vec![0.0f64; len];
        for t in 0..frames {
            for (m, w) in win.iter().enumerate() {
                let n = (t * cfg.frame_shift + m) as isize - half as isize;
                if n >= 0 && (n as usize) < len {
                    env[n as usize] += w * w;
                }
            }
        }
        let inv: Vec<f64> = env.iter().map(|e| if *e > 1e-11 { 1.0 / e } else { 0.0 }).collect();
        Ok(Tensor::from_vec(inv, len, device)?.to_dtype(dtype)?)
    }

    /// `[batch, frames, bins]` log-amplitude and phase to `[batch, frames * frame_shift]` samples.
    pub fn forward(&self, log_amplitude: &Tensor, phase: &Tensor) -> Result<Tensor> {
        let (b, frames, bins) = log_amplitude.dims3()?;
        if bins != self.cfg.num_bins() || phase.dims() != log_amplitude.dims() {
            return Err(Error::invalid(format!(
                "istft expects [.., .., {}] spectra, got {:?} and {:?}",
                self.cfg.num_bins(),
                log_amplitude.dims(),
                phase.dims()
            )));
        }
        let mag = log_amplitude.exp()?;
        let re = (&mag * phase.cos()?)?;
        let im = (&mag * phase.sin()?)?;
        let frames_td =
            (re.broadcast_matmul(&self.cos_basis)? + im.broadcast_matmul(&self.sin_basis)?)?;
        let hop = self.cfg.frame_shift;
        let overlap = self.cfg.frame_length / hop;
        let chunks = frames_td.reshape((b, frames, overlap, hop))?;
        let mut parts = Vec::with_capacity(overlap);
        for s in 0..overlap {
            let chunk = chunks.narrow(2, s, 1)?.squeeze(2)?;
            parts.push(chunk.pad_with_zeros(1, s, overlap - s)?);
        }
        let summed = crate::nn::ops::sum_tensors(&parts)?;
        let flat = summed.reshape((b, (frames + overlap) * hop))?;
        let out = flat.narrow(1, self.cfg.frame_length / 2, frames * hop)?;
        let inv = self.inverse_envelope(frames, out.dtype(), out.device())?;
        Ok(out.broadcast_mul(&inv)?)
    }
}

/// Centered, reflect-padded magnitude STFT of a waveform batch.
#[derive(Debug, Clone)]
pub struct DiffStftMagnitude {
    pub fft_size: usize,
    pub hop: usize,
    cos_basis: Tensor,
    sin_basis: Tensor,
}

impl DiffStftMagnitude {
    pub fn new(fft_size: usize, hop: usize, dtype: DType, device: &Device) -> Result<Self> {
        if fft_size == 0 || hop == 0 {
            return Err(Error::Config("stft resolution must be positive".into()));
        }
        let bins = fft_size / 2 + 1;
        let win = hann_window(fft_size);
        let mut cos_b = vec![0.0f64; fft_size * bins];
        let mut sin_b = vec![0.0f64; fft_size * bins];
        for n in 0..fft_size {
            for k in 0..bins {
                let ang = -2.0 * PI * (k * n) as f64 / fft_size as f64;
                cos_b[n * bins + k] = ang.cos() * win[n];
                sin_b[n * bins + k] = ang.sin() * win[n];
            }
        }
        Ok(Self {
            fft_size,
            hop,
            cos_basis: Tensor::from_vec(cos_b, (fft_size, bins), device)?.to_dtype(dtype)?,
            sin_basis: Tensor::from_vec(sin_b, (fft_size, bins), device)?.to_dtype(dtype)?,
        })
    }

    /// `[batch, samples]` to `[batch, frames, bins]` magnitudes, floored at 1e-5.
    pub fn forward(&self, wave: &Tensor) -> Result<Tensor> {
        let (b, len) = wave.dims2()?;
        if len < self.fft_size {
            return Err(Error::invalid(format!(
                "waveform of {len} samples is shorter than the {}-point analysis window",
                self.fft_size
            )));
        }
        let half = self.fft_size / 2;
        let frames = len / self.hop + 1;
        let mut idx = Vec::with_capacity(frames * self.fft_size);
        for t in 0..frames {
            for n in 0..self.fft_size {
                let mut j = (t * self.hop + n) as isize - half as isize;
                if j < 0 {
                    j = -j;
                }
                let last = len as isize - 1;
                if j > last {
                    j = 2 * last - j;
                }
                idx.push(j.clamp(0, last) as u32);
            }
        }
        let idx = Tensor::from_vec(idx, frames * self.fft_size, wave.device())?;
        let framed = wave
            .contiguous()?
            .index_select(&idx, 1)?
            .reshape((b, frames, self.fft_size))?;
        let re = framed.broadcast_matmul(&self.cos_basis)?;
        let im = framed.broadcast_matmul(&self.sin_basis)?;
        Ok((re.sqr()? + im.sqr()?)?.affine(1.0, 1e-10)?.sqrt()?)
    }
}
