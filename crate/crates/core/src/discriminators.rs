//! Multi-period and multi-resolution waveform discriminators.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Conv1d, Conv2d};
use crate::nn::ops::leaky_relu;
use crate::nn::params::{rng_for, Initializer, ParamStore};
use crate::nn::spectral::DiffStftMagnitude;

const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    /// `(fft_size, hop)` pairs.
    pub resolutions: Vec<(usize, usize)>,
    /// Output channels of the strided period layers; the last entry is applied with stride 1.
    pub mpd_channels: Vec<usize>,
    pub mpd_kernel: usize,
    pub mpd_stride: usize,
    /// Width of every spectrogram layer.
    pub mrd_channels: usize,
    pub mrd_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            periods: vec![2, 3, 5, 7, 11],
            resolutions: vec![(512, 128), (1024, 256), (2048, 512)],
            mpd_channels: vec![32, 128, 512, 1024, 1024],
            mpd_kernel: 5,
            mpd_stride: 3,
            mrd_channels: 32,
            mrd_layers: 5,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.periods.is_empty() && self.resolutions.is_empty() {
            return Err(Error::Config("discriminator needs at least one period or resolution".into()));
        }
        if self.periods.contains(&0) {
            return Err(Error::Config("discriminator periods must be positive".into()));
        }
        if self.resolutions.iter().any(|(n, h)| *n < 2 || *h == 0) {
            return Err(Error::Config("discriminator resolutions need fft >= 2 and hop >= 1".into()));
        }
        if !self.periods.is_empty() && (self.mpd_channels.is_empty() || self.mpd_channels.contains(&0)) {
            return Err(Error::Config("mpd_channels must be non-empty and positive".into()));
        }
        if self.mpd_kernel % 2 == 0 || self.mpd_stride == 0 {
            return Err(Error::Config("mpd_kernel must be odd and mpd_stride positive".into()));
        }
        if !self.resolutions.is_empty() && (self.mrd_channels == 0 || self.mrd_layers == 0) {
            return Err(Error::Config("mrd_channels and mrd_layers must be positive".into()));
        }
        Ok(())
    }

    /// Shortest waveform both discriminators accept.
    pub fn min_samples(&self) -> usize {
        let p = self.periods.iter().copied().max().unwrap_or(1);
        let r = self.resolutions.iter().map(|(n, _)| *n).max().unwrap_or(1);
        p.max(r)
    }
}

/// One score map and the intermediate feature maps per sub-discriminator.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    pub scores: Vec<Tensor>,
    pub features: Vec<Vec<Tensor>>,
}

impl DiscriminatorOutput {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn extend(&mut self, other: DiscriminatorOutput) {
        self.scores.extend(other.scores);
        self.features.extend(other.features);
    }
}

/// Zero-pads `[batch, samples]` to a multiple of `period` and folds it to
/// `[batch, samples / period, period]`.
pub fn fold_period(wave: &Tensor, period: usize) -> Result<Tensor> {
    let (b, len) = wave.dims2()?;
    let padded_len = len.div_ceil(period) * period;
    let padded = wave.pad_with_zeros(1, 0, padded_len - len)?;
    Ok(padded.reshape((b, padded_len / period, period))?)
}

#[derive(Debug, Clone)]
struct PeriodDiscriminator {
    period: usize,
    convs: Vec<Conv1d>,
    post: Conv1d,
}

impl PeriodDiscriminator {
    fn new(init: &mut Initializer, name: &str, period: usize, cfg: &DiscriminatorConfig) -> Result<Self> {
        let mut convs = Vec::new();
        let mut input = 1;
        let last = cfg.mpd_channels.len() - 1;
        for (i, &out) in cfg.mpd_channels.iter().enumerate() {
            let stride = if i == last { 1 } else { cfg.mpd_stride };
            convs.push(Conv1d::new(
                init,
                &format!("{name}.convs.{i}"),
                input,
                out,
                cfg.mpd_kernel,
                stride,
                cfg.mpd_kernel / 2,
            )?);
            input = out;
        }
        let post = Conv1d::new(init, &format!("{name}.post"), input, 1, 3, 1, 1)?;
        Ok(Self { period, convs, post })
    }

    /// Each column of the folded map is convolved along time with shared weights,
    /// which is a 2-D convolution with a `(kernel, 1)` window.
    fn forward(&self, wave: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let folded = fold_period(wave, self.period)?;
        let (b, rows, p) = folded.dims3()?;
        let mut h = folded.transpose(1, 2)?.contiguous()?.reshape((b * p, 1, rows))?;
        let mut features = Vec::with_capacity(self.convs.len() + 1);
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?, LEAKY_SLOPE)?;
            features.push(h.clone());
        }
        let score = self.post.forward(&h)?;
        features.push(score.clone());
        Ok((score.reshape((b, ()))?, features))
    }
}

#[derive(Debug, Clone)]
struct ResolutionDiscriminator {
    stft: DiffStftMagnitude,
    convs: Vec<Conv2d>,
    post: Conv2d,
}

impl ResolutionDiscriminator {
    fn new(init: &mut Initializer, name: &str, res: (usize, usize), cfg: &DiscriminatorConfig) -> Result<Self> {
        let stft = DiffStftMagnitude::new(res.0, res.1, init.dtype(), &init.device())?;
        let mut convs = Vec::new();
        let mut input = 1;
        for i in 0..cfg.mrd_layers {
            convs.push(Conv2d::new(init, &format!("{name}.convs.{i}"), input, cfg.mrd_channels, 3)?);
            input = cfg.mrd_channels;
        }
        let post = Conv2d::new(init, &format!("{name}.post"), input, 1, 3)?;
        Ok(Self { stft, convs, post })
    }

    fn forward(&self, wave: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let b = wave.dim(0)?;
        let mut h = self.stft.forward(wave)?.unsqueeze(1)?;
        let mut features = Vec::with_capacity(self.convs.len() + 1);
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?, LEAKY_SLOPE)?;
            features.push(h.clone());
        }
        let score = self.post.forward(&h)?;
        features.push(score.clone());
        Ok((score.reshape((b, ()))?, features))
    }
}

/// Both discriminator families with their own parameter store
/// (`mpd.*` and `mrd.*`).
#[derive(Debug)]
pub struct Discriminators {
    config: DiscriminatorConfig,
    params: ParamStore,
    periods: Vec<PeriodDiscriminator>,
    resolutions: Vec<ResolutionDiscriminator>,
}

impl Discriminators {
    pub fn new(config: DiscriminatorConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype, Device::Cpu);
        let mut periods = Vec::new();
        {
            let mut init = Initializer::new(&mut params, rng_for(seed, "mpd"));
            for (i, &p) in config.periods.iter().enumerate() {
                periods.push(PeriodDiscriminator::new(&mut init, &format!("mpd.{i}"), p, &config)?);
            }
        }
        let mut resolutions = Vec::new();
        {
            let mut init = Initializer::new(&mut params, rng_for(seed, "mrd"));
            for (i, &r) in config.resolutions.iter().enumerate() {
                resolutions.push(ResolutionDiscriminator::new(&mut init, &format!("mrd.{i}"), r, &config)?);
            }
        }
        Ok(Self {
            config,
            params,
            periods,
            resolutions,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn check_len(&self, wave: &Tensor, need: usize, what: &str) -> Result<()> {
        let (_, len) = wave.dims2()?;
        if len < need {
            return Err(Error::invalid(format!("{what} needs at least {need} samples, got {len}")));
        }
        Ok(())
    }

    /// `[batch, samples]` waveform through every period discriminator.
    pub fn mpd_forward(&self, wave: &Tensor) -> Result<DiscriminatorOutput> {
        let need = self.config.periods.iter().copied().max().unwrap_or(1);
        self.check_len(wave, need, "multi-period discriminator")?;
        let mut out = DiscriminatorOutput {
            scores: Vec::new(),
            features: Vec::new(),
        };
        for d in &self.periods {
            let (s, f) = d.forward(wave)?;
            out.scores.push(s);
            out.features.push(f);
        }
        Ok(out)
    }

    /// `[batch, samples]` waveform through every resolution discriminator.
    pub fn mrd_forward(&self, wave: &Tensor) -> Result<DiscriminatorOutput> {
        let need = self.config.resolutions.iter().map(|(n, _)| *n).max().unwrap_or(1);
        self.check_len(wave, need, "multi-resolution discriminator")?;
        let mut out = DiscriminatorOutput {
            scores: Vec::new(),
            features: Vec::new(),
        };
        for d in &self.resolutions {
            let (s, f) = d.forward(wave)?;
            out.scores.push(s);
            out.features.push(f);
        }
        Ok(out)
    }

    /// Period outputs followed by resolution outputs.
    pub fn forward(&self, wave: &Tensor) -> Result<DiscriminatorOutput> {
        let mut out = self.mpd_forward(wave)?;
        out.extend(self.mrd_forward(wave)?);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small() -> DiscriminatorConfig {
        DiscriminatorConfig {
            periods: vec![2, 3, 5, 7, 11],
            resolutions: vec![(64, 16), (128, 32), (256, 64)],
            mpd_channels: vec![4, 8, 8],
            mpd_kernel: 5,
            mpd_stride: 3,
            mrd_channels: 4,
            mrd_layers: 2,
        }
    }

    fn noise(b: usize, n: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..b * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (b, n), &Device::Cpu).unwrap()
    }

    #[test]
    fn fold_shapes() {
        let w = Tensor::zeros((1, 7960), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(fold_period(&w, 2).unwrap().dims(), &[1, 3980, 2]);
        assert_eq!(fold_period(&w, 3).unwrap().dims(), &[1, 2654, 3]);
        let seq = Tensor::arange(0f32, 7.0, &Device::Cpu).unwrap().unsqueeze(0).unwrap();
        let f = fold_period(&seq, 3).unwrap().to_vec3::<f32>().unwrap();
        assert_eq!(f[0], vec![vec![0.0, 1.0, 2.0], vec![3.0, 4.0, 5.0], vec![6.0, 0.0, 0.0]]);
    }

    #[test]
    fn output_counts_and_determinism() {
        let d = Discriminators::new(small(), 3, DType::F32).unwrap();
        let w = noise(2, 600, 1);
        let a = d.forward(&w).unwrap();
        assert_eq!(d.mpd_forward(&w).unwrap().len(), 5);
        assert_eq!(d.mrd_forward(&w).unwrap().len(), 3);
        assert_eq!(a.len(), 8);
        assert_eq!(a.features.len(), 8);
        let b = d.forward(&w).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert_eq!(x.to_vec2::<f32>().unwrap(), y.to_vec2::<f32>().unwrap());
        }
    }

    #[test]
    fn degenerate_inputs_are_finite_and_scale_matters() {
        let d = Discriminators::new(small(), 4, DType::F32).unwrap();
        let zero = Tensor::zeros((1, 512), DType::F32, &Device::Cpu).unwrap();
        let clipped = Tensor::ones((1, 512), DType::F32, &Device::Cpu).unwrap();
        let w = noise(1, 512, 2);
        for input in [&zero, &clipped, &w] {
            for s in d.forward(input).unwrap().scores {
                assert!(s.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
            }
        }
        let a = d.mrd_forward(&w).unwrap();
        let b = d.mrd_forward(&(&w * 2.0).unwrap()).unwrap();
        let diff = (&a.scores[0] - &b.scores[0]).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f32>().unwrap() > 0.0);
    }

    #[test]
    fn short_input_rejected() {
        let d = Discriminators::new(small(), 5, DType::F32).unwrap();
        assert!(d.mpd_forward(&noise(1, 10, 0)).is_err());
        assert!(d.mrd_forward(&noise(1, 200, 0)).is_err());
        assert_eq!(small().min_samples(), 256);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let cfg = DiscriminatorConfig {
            periods: vec![3],
            resolutions: vec![(16, 4)],
            mpd_channels: vec![2, 3],
            mpd_kernel: 5,
            mpd_stride: 3,
            mrd_channels: 2,
            mrd_layers: 2,
        };
        let d = Discriminators::new(cfg, 6, DType::F64).unwrap();
        let w = noise(1, 40, 3).to_dtype(DType::F64).unwrap();
        let loss = |d: &Discriminators| -> Tensor {
            let out = d.forward(&w).unwrap();
            let parts: Vec<Tensor> = out.scores.iter().map(|s| s.sqr().unwrap().mean_all().unwrap()).collect();
            crate::nn::ops::sum_tensors(&parts).unwrap()
        };
        let grads = loss(&d).backward().unwrap();
        let h = 1e-5;
        for (name, var) in d.params().iter() {
            let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for i in [0, base.len() / 2, base.len() - 1] {
                let mut plus = base.clone();
                plus[i] += h;
                var.set(&Tensor::from_vec(plus, var.shape(), &Device::Cpu).unwrap()).unwrap();
                let lp = crate::nn::ops::scalar(&loss(&d)).unwrap();
                let mut minus = base.clone();
                minus[i] -= h;
                var.set(&Tensor::from_vec(minus, var.shape(), &Device::Cpu).unwrap()).unwrap();
                let lm = crate::nn::ops::scalar(&loss(&d)).unwrap();
                var.set(&Tensor::from_vec(base.clone(), var.shape(), &Device::Cpu).unwrap()).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
                assert!(err < 1e-4 || (fd - g[i]).abs() < 1e-9, "{name}[{i}]: fd {fd} vs analytic {}", g[i]);
            }
        }
    }
}
