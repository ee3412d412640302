//! Encoder, decoder, and the inference pipeline around them.

use candle_core::{DType, Device, Tensor};

use super::config::{bitrate_kbps, CodecConfig};
use super::quantizer::{dequantize, quantize, Codebooks, LatentSequence, QuantizeOutput, TokenSequence};
use crate::error::{Error, Result};
use crate::frontend::{SignalConfig, SpectralPair, Stft};
use crate::nn::layers::{ConvNextBlock, Downsample, LayerNorm, Linear, Upsample};
use crate::nn::params::{rng_for, Initializer, ParamStore};
use crate::nn::spectral::DiffIstft;
use crate::nn::ops;

/// Initial standard deviation of stage-0 codewords before data-driven initialization.
const CODEBOOK_INIT_SCALE: f32 = 1.0;

fn backbone(init: &mut Initializer, name: &str, cfg: &CodecConfig) -> Result<Vec<ConvNextBlock>> {
    (0..cfg.num_blocks)
        .map(|i| {
            ConvNextBlock::new(
                init,
                &format!("{name}.blocks.{i}"),
                cfg.channel_size,
                cfg.channel_size,
                cfg.kernel_size,
            )
        })
        .collect()
}

#[derive(Debug, Clone)]
struct EncoderBranch {
    input: Linear,
    norm_in: LayerNorm,
    blocks: Vec<ConvNextBlock>,
    norm_out: LayerNorm,
    down: Downsample,
}

impl EncoderBranch {
    fn new(init: &mut Initializer, name: &str, cfg: &CodecConfig, bins: usize) -> Result<Self> {
        let c = cfg.channel_size;
        Ok(Self {
            input: Linear::new(init, &format!("{name}.input"), bins, c)?,
            norm_in: LayerNorm::new(init, &format!("{name}.norm_in"), c)?,
            blocks: backbone(init, name, cfg)?,
            norm_out: LayerNorm::new(init, &format!("{name}.norm_out"), c)?,
            down: Downsample::new(init, &format!("{name}.down"), c, c, cfg.down_up_ratio)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.norm_in.forward(&self.input.forward(x)?)?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        self.down.forward(&self.norm_out.forward(&h)?)
    }
}

/// Two parallel sub-encoders (amplitude, phase) whose downsampled outputs are
/// concatenated and projected to the latent width.
#[derive(Debug, Clone)]
pub struct Encoder {
    amplitude: EncoderBranch,
    phase: EncoderBranch,
    reduce: Linear,
    ratio: usize,
    bins: usize,
}

impl Encoder {
    pub fn new(init: &mut Initializer, cfg: &CodecConfig, bins: usize) -> Result<Self> {
        Ok(Self {
            amplitude: EncoderBranch::new(init, "encoder.amplitude", cfg, bins)?,
            phase: EncoderBranch::new(init, "encoder.phase", cfg, bins)?,
            reduce: Linear::new(init, "encoder.reduce", 2 * cfg.channel_size, cfg.latent_dim)?,
            ratio: cfg.down_up_ratio,
            bins,
        })
    }

    /// `[batch, frames, bins]` spectra to `[batch, frames / ratio, latent_dim]`.
    pub fn forward(&self, log_amplitude: &Tensor, phase: &Tensor) -> Result<Tensor> {
        let (_, frames, bins) = log_amplitude.dims3()?;
        if bins != self.bins || phase.dims() != log_amplitude.dims() {
            return Err(Error::invalid(format!(
                "encoder expects matching [.., .., {}] spectra, got {:?} and {:?}",
                self.bins,
                log_amplitude.dims(),
                phase.dims()
            )));
        }
        if frames == 0 || frames % self.ratio != 0 {
            return Err(Error::invalid(format!(
                "encoder needs a positive frame count divisible by {}, got {frames}",
                self.ratio
            )));
        }
        let a = self.amplitude.forward(log_amplitude)?;
        let p = self.phase.forward(phase)?;
        self.reduce.forward(&Tensor::cat(&[&a, &p], 2)?)
    }
}

#[derive(Debug, Clone)]
struct DecoderBranch {
    up: Upsample,
    norm_in: LayerNorm,
    blocks: Vec<ConvNextBlock>,
    norm_out: LayerNorm,
}

impl DecoderBranch {
    fn new(init: &mut Initializer, name: &str, cfg: &CodecConfig) -> Result<Self> {
        let c = cfg.channel_size;
        Ok(Self {
            up: Upsample::new(init, &format!("{name}.up"), c, c, cfg.down_up_ratio)?,
            norm_in: LayerNorm::new(init, &format!("{name}.norm_in"), c)?,
            blocks: backbone(init, name, cfg)?,
            norm_out: LayerNorm::new(init, &format!("{name}.norm_out"), c)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.norm_in.forward(&self.up.forward(x)?)?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        self.norm_out.forward(&h)
    }
}

/// Mirror of [`Encoder`]: restore width, upsample in two branches, then emit
/// log-amplitude directly and phase as `atan2(imag, real)` of two parallel heads.
#[derive(Debug, Clone)]
pub struct Decoder {
    restore: Linear,
    amplitude: DecoderBranch,
    phase: DecoderBranch,
    amplitude_head: Linear,
    real_head: Linear,
    imag_head: Linear,
    latent_dim: usize,
}

impl Decoder {
    pub fn new(init: &mut Initializer, cfg: &CodecConfig, bins: usize) -> Result<Self> {
        let c = cfg.channel_size;
        Ok(Self {
            restore: Linear::new(init, "decoder.restore", cfg.latent_dim, c)?,
            amplitude: DecoderBranch::new(init, "decoder.amplitude", cfg)?,
            phase: DecoderBranch::new(init, "decoder.phase", cfg)?,
            amplitude_head: Linear::new(init, "decoder.amplitude_head", c, bins)?,
            real_head: Linear::new(init, "decoder.real_head", c, bins)?,
            imag_head: Linear::new(init, "decoder.imag_head", c, bins)?,
            latent_dim: cfg.latent_dim,
        })
    }

    /// `[batch, latent_frames, latent_dim]` to (log-amplitude, phase), each `[batch, frames, bins]`.
    pub fn forward(&self, latent: &Tensor) -> Result<(Tensor, Tensor)> {
        self.forward_with_phase_scale(latent, 1.0)
    }

    /// Same as [`Decoder::forward`] with both phase head outputs multiplied by `scale`
    /// before the arctangent.
    pub fn forward_with_phase_scale(&self, latent: &Tensor, scale: f64) -> Result<(Tensor, Tensor)> {
        let (_, _, dim) = latent.dims3()?;
        if dim != self.latent_dim {
            return Err(Error::invalid(format!(
                "decoder expects latent width {}, got {dim}",
                self.latent_dim
            )));
        }
        let h = self.restore.forward(latent)?;
        let a = self.amplitude.forward(&h)?;
        let p = self.phase.forward(&h)?;
        let log_amplitude = self.amplitude_head.forward(&a)?;
        let real = self.real_head.forward(&p)?.affine(scale, 0.0)?;
        let imag = self.imag_head.forward(&p)?.affine(scale, 0.0)?;
        Ok((log_amplitude, ops::atan2(&imag, &real)?))
    }
}

/// Encoded utterance: tokens plus the sample count needed to trim the decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedUtterance {
    pub tokens: TokenSequence,
    pub original_samples: usize,
}

/// Generator side of the codec: encoder, codebooks, decoder.
///
/// Parameters live in shared variables, so this type is deliberately not `Clone`;
/// use [`CodecModel::duplicate`] for an independent copy.
#[derive(Debug)]
pub struct CodecModel {
    signal: SignalConfig,
    config: CodecConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    codebooks: Codebooks,
    istft: DiffIstft,
}

impl CodecModel {
    /// Fresh model. Encoder, decoder and codebooks draw from independent streams of `seed`.
    pub fn new(signal: SignalConfig, config: CodecConfig, seed: u64, dtype: DType) -> Result<Self> {
        signal.validate()?;
        config.validate()?;
        let device = Device::Cpu;
        let bins = signal.num_bins();
        let mut params = ParamStore::new(dtype, device.clone());
        let encoder = Encoder::new(&mut Initializer::new(&mut params, rng_for(seed, "encoder")), &config, bins)?;
        let decoder = Decoder::new(&mut Initializer::new(&mut params, rng_for(seed, "decoder")), &config, bins)?;
        let codebooks = Codebooks::random(
            config.num_quantizers,
            config.codebook_size,
            config.latent_dim,
            CODEBOOK_INIT_SCALE,
            &mut rng_for(seed, "codebooks"),
        );
        Ok(Self {
            signal,
            config,
            params,
            encoder,
            decoder,
            codebooks,
            istft: DiffIstft::new(signal, dtype, &device)?,
        })
    }

    /// Independent copy with identical parameter values and codebooks.
    pub fn duplicate(&self) -> Result<Self> {
        let mut copy = Self::new(self.signal, self.config, 0, self.params.dtype())?;
        copy.params.load("encoder.", &self.params.export("encoder.")?)?;
        copy.params.load("decoder.", &self.params.export("decoder.")?)?;
        copy.codebooks = self.codebooks.clone();
        Ok(copy)
    }

    /// Decoder parameters as freshly initialized from `seed`, without touching this model.
    pub fn fresh_decoder_values(&self, seed: u64) -> Result<std::collections::BTreeMap<String, crate::nn::TensorData>> {
        let mut scratch = ParamStore::new(self.params.dtype(), Device::Cpu);
        Decoder::new(
            &mut Initializer::new(&mut scratch, rng_for(seed, "decoder")),
            &self.config,
            self.signal.num_bins(),
        )?;
        scratch.export("decoder.")
    }

    /// Replaces every decoder parameter with a fresh initialization from `seed`.
    pub fn reinitialize_decoder(&mut self, seed: u64) -> Result<()> {
        let values = self.fresh_decoder_values(seed)?;
        self.params.load("decoder.", &values)
    }

    pub fn signal(&self) -> &SignalConfig {
        &self.signal
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn istft(&self) -> &DiffIstft {
        &self.istft
    }

    pub fn codebooks(&self) -> &Codebooks {
        &self.codebooks
    }

    pub fn codebooks_mut(&mut self) -> &mut Codebooks {
        &mut self.codebooks
    }

    pub fn set_codebooks(&mut self, books: Codebooks) -> Result<()> {
        if books.num_quantizers() != self.config.num_quantizers
            || books.codebook_size() != self.config.codebook_size
            || books.dim() != self.config.latent_dim
        {
            return Err(Error::Incompatible(format!(
                "codebooks are {}x{}x{}, config wants {}x{}x{}",
                books.num_quantizers(),
                books.codebook_size(),
                books.dim(),
                self.config.num_quantizers,
                self.config.codebook_size,
                self.config.latent_dim
            )));
        }
        self.codebooks = books;
        Ok(())
    }

    pub fn bitrate_kbps(&self) -> f64 {
        bitrate_kbps(&self.config, &self.signal)
    }

    fn pair_tensors(&self, pair: &SpectralPair) -> Result<(Tensor, Tensor)> {
        let shape = (1, pair.frames(), pair.bins());
        let dtype = self.params.dtype();
        let la = Tensor::from_slice(pair.log_amplitude(), shape, &Device::Cpu)?.to_dtype(dtype)?;
        let ph = Tensor::from_slice(pair.phase(), shape, &Device::Cpu)?.to_dtype(dtype)?;
        Ok((la, ph))
    }

    /// Continuous latents for one utterance. The frame count must already be a
    /// multiple of `down_up_ratio`.
    pub fn encode(&self, pair: &SpectralPair) -> Result<LatentSequence> {
        if pair.bins() != self.signal.num_bins() {
            return Err(Error::invalid(format!(
                "spectra have {} bins, model expects {}",
                pair.bins(),
                self.signal.num_bins()
            )));
        }
        let (la, ph) = self.pair_tensors(pair)?;
        let z = self.encoder.forward(&la, &ph)?.squeeze(0)?;
        let (frames, dim) = z.dims2()?;
        LatentSequence::new(frames, dim, z.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }

    pub fn quantize(&self, latent: &LatentSequence) -> Result<QuantizeOutput> {
        quantize(latent, &self.codebooks)
    }

    pub fn dequantize(&self, tokens: &TokenSequence) -> Result<LatentSequence> {
        dequantize(tokens, &self.codebooks)
    }

    /// Spectra for `latent.frames() * down_up_ratio` frames.
    pub fn decode(&self, latent: &LatentSequence) -> Result<SpectralPair> {
        self.decode_with_phase_scale(latent, 1.0)
    }

    pub fn decode_with_phase_scale(&self, latent: &LatentSequence, scale: f64) -> Result<SpectralPair> {
        if latent.dim() != self.config.latent_dim {
            return Err(Error::invalid(format!(
                "latent width {} does not match config {}",
                latent.dim(),
                self.config.latent_dim
            )));
        }
        let z = Tensor::from_slice(latent.values(), (1, latent.frames(), latent.dim()), &Device::Cpu)?
            .to_dtype(self.params.dtype())?;
        let (la, ph) = self.decoder.forward_with_phase_scale(&z, scale)?;
        let (_, frames, bins) = la.dims3()?;
        let la = la.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let ph = ph.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        SpectralPair::new(frames, bins, la, ph)
    }

    /// Waveform to tokens: analyze, pad frames, encode, quantize.
    pub fn encode_waveform(&self, stft: &Stft, waveform: &[f32]) -> Result<EncodedUtterance> {
        let pair = stft.analyze(waveform)?;
        let padded = pair.pad_frames_to_multiple(self.config.down_up_ratio)?;
        let latent = self.encode(&padded)?;
        let q = self.quantize(&latent)?;
        Ok(EncodedUtterance {
            tokens: q.tokens,
            original_samples: waveform.len(),
        })
    }

    /// Tokens to waveform: dequantize, decode, trim frames, synthesize, trim samples.
    pub fn decode_tokens(&self, stft: &Stft, tokens: &TokenSequence, original_samples: usize) -> Result<Vec<f32>> {
        if tokens.frames() == 0 {
            return Ok(vec![0.0; original_samples]);
        }
        let latent = self.dequantize(tokens)?;
        let mut pair = self.decode(&latent)?;
        pair.truncate_frames(self.signal.frame_count(original_samples));
        let mut wave = stft.synthesize(&pair)?;
        wave.resize(original_samples, 0.0);
        Ok(wave)
    }
}
