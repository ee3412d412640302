//! Training objective: spectral terms, quantization term, adversarial terms.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::discriminators::DiscriminatorOutput;
use crate::error::{Error, Result};
use crate::frontend::{SignalConfig, SpectralPair};
use crate::model::LatentSequence;
use crate::nn::ops;

/// Weight of the encoder-side commitment part of the quantization loss.
pub const COMMITMENT_WEIGHT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_amp: f64,
    pub w_phase: f64,
    pub w_mel: f64,
    pub w_complex: f64,
    pub w_quant: f64,
    pub w_adv: f64,
    pub w_fm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_amp: 4.5,
            w_phase: 10.0,
            w_mel: 4.5,
            w_complex: 4.5,
            w_quant: 1.0,
            w_adv: 1.0,
            w_fm: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_amp,
            self.w_phase,
            self.w_mel,
            self.w_complex,
            self.w_quant,
            self.w_adv,
            self.w_fm,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    /// Whether the discriminators take part in training at all.
    pub fn adversarial(&self) -> bool {
        self.w_adv > 0.0 || self.w_fm > 0.0
    }
}

/// Scalar anti-wrapping function `|x - 2 pi round(x / 2 pi)|`, in `[0, pi]`.
/// Rounds half away from zero.
pub fn anti_wrap(x: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    (x - two_pi * (x / two_pi).round()).abs()
}

/// Triangular mel filters on the HTK mel scale, stored as a `[bins, n_mels]` matrix.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    matrix: Tensor,
    n_mels: usize,
    bins: usize,
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Filter weights `[bins][n_mels]` as plain numbers.
pub fn mel_weights(sig: &SignalConfig, n_mels: usize, fmin: f64, fmax: f64) -> Result<Vec<Vec<f64>>> {
    let nyquist = sig.sample_rate as f64 / 2.0;
    if n_mels == 0 || fmin < 0.0 || fmax <= fmin || fmax > nyquist + 1e-9 {
        return Err(Error::Config(format!(
            "mel filterbank needs n_mels > 0 and 0 <= fmin < fmax <= {nyquist}, got {n_mels}, {fmin}, {fmax}"
        )));
    }
    let bins = sig.num_bins();
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut w = vec![vec![0.0; n_mels]; bins];
    for (k, row) in w.iter_mut().enumerate() {
        let f = k as f64 * sig.sample_rate as f64 / sig.fft_size as f64;
        for (m, cell) in row.iter_mut().enumerate() {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let up = (f - l) / (c - l);
            let down = (r - f) / (r - c);
            *cell = up.min(down).max(0.0);
        }
    }
    Ok(w)
}

impl MelFilterbank {
    pub fn new(sig: &SignalConfig, n_mels: usize, fmin: f64, fmax: f64, dtype: DType) -> Result<Self> {
        let w = mel_weights(sig, n_mels, fmin, fmax)?;
        let bins = w.len();
        let flat: Vec<f64> = w.into_iter().flatten().collect();
        Ok(Self {
            matrix: Tensor::from_vec(flat, (bins, n_mels), &Device::Cpu)?.to_dtype(dtype)?,
            n_mels,
            bins,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    /// `[batch, frames, bins]` magnitudes to `[batch, frames, n_mels]`.
    pub fn project(&self, magnitude: &Tensor) -> Result<Tensor> {
        if magnitude.dim(candle_core::D::Minus1)? != self.bins {
            return Err(Error::invalid(format!(
                "mel filterbank expects {} bins, got {:?}",
                self.bins,
                magnitude.dims()
            )));
        }
        Ok(magnitude.broadcast_matmul(&self.matrix.to_dtype(magnitude.dtype())?)?)
    }
}

/// The four spectral terms, each a scalar tensor.
#[derive(Debug, Clone)]
pub struct SpectralTerms {
    pub amplitude: Tensor,
    pub phase: Tensor,
    pub mel: Tensor,
    pub complex: Tensor,
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!("{what} shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean anti-wrapped instantaneous-phase error plus group-delay error (frequency
/// differences) plus instantaneous-angular-frequency error (time differences).
/// Inputs are `[batch, frames, bins]`.
pub fn phase_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (ip, gd, iaf) = phase_components(pred, target)?;
    Ok(((ip + gd)? + iaf)?)
}

/// The three phase sub-terms separately. A dimension of size one contributes zero
/// for its difference term.
pub fn phase_components(pred: &Tensor, target: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    check_same(pred, target, "phase")?;
    let (_, frames, bins) = pred.dims3()?;
    let err = (pred - target)?;
    let ip = ops::anti_wrap(&err)?.mean_all()?;
    let zero = || Tensor::zeros((), err.dtype(), err.device());
    let gd = if bins > 1 {
        let d = (err.narrow(2, 1, bins - 1)? - err.narrow(2, 0, bins - 1)?)?;
        ops::anti_wrap(&d)?.mean_all()?
    } else {
        zero()?
    };
    let iaf = if frames > 1 {
        let d = (err.narrow(1, 1, frames - 1)? - err.narrow(1, 0, frames - 1)?)?;
        ops::anti_wrap(&d)?.mean_all()?
    } else {
        zero()?
    };
    Ok((ip, gd, iaf))
}

/// Spectral terms between predicted and target log-amplitude/phase tensors.
pub fn spectral_losses(
    pred_log_amplitude: &Tensor,
    pred_phase: &Tensor,
    target_log_amplitude: &Tensor,
    target_phase: &Tensor,
    mel: &MelFilterbank,
) -> Result<SpectralTerms> {
    check_same(pred_log_amplitude, target_log_amplitude, "log-amplitude")?;
    check_same(pred_phase, pred_log_amplitude, "phase and log-amplitude")?;
    check_same(target_phase, target_log_amplitude, "phase and log-amplitude")?;
    let amplitude = ops::mse(pred_log_amplitude, target_log_amplitude)?;
    let phase = phase_loss(pred_phase, target_phase)?;
    let pred_mag = pred_log_amplitude.exp()?;
    let target_mag = target_log_amplitude.exp()?;
    let mel_term = ops::mean_abs_diff(&mel.project(&pred_mag)?, &mel.project(&target_mag)?)?;
    let re = ops::mse(&(&pred_mag * pred_phase.cos()?)?, &(&target_mag * target_phase.cos()?)?)?;
    let im = ops::mse(&(&pred_mag * pred_phase.sin()?)?, &(&target_mag * target_phase.sin()?)?)?;
    // Mean squared error over the complex entries: both components share one denominator.
    let complex = (re + im)?;
    Ok(SpectralTerms {
        amplitude,
        phase,
        mel: mel_term,
        complex,
    })
}

/// Spectral terms `[amplitude, phase, mel, complex]` between two spectra, in f64.
pub fn spectral_losses_pair(pred: &SpectralPair, target: &SpectralPair, mel: &MelFilterbank) -> Result<[f64; 4]> {
    if pred.frames() != target.frames() || pred.bins() != target.bins() {
        return Err(Error::invalid(format!(
            "spectra differ in shape: {}x{} vs {}x{}",
            pred.frames(),
            pred.bins(),
            target.frames(),
            target.bins()
        )));
    }
    let shape = (1, pred.frames(), pred.bins());
    let t = |v: &[f32]| -> Result<Tensor> {
        Ok(Tensor::from_slice(v, shape, &Device::Cpu)?.to_dtype(DType::F64)?)
    };
    let terms = spectral_losses(
        &t(pred.log_amplitude())?,
        &t(pred.phase())?,
        &t(target.log_amplitude())?,
        &t(target.phase())?,
        mel,
    )?;
    Ok([
        ops::scalar(&terms.amplitude)?,
        ops::scalar(&terms.phase)?,
        ops::scalar(&terms.mel)?,
        ops::scalar(&terms.complex)?,
    ])
}

/// Sum over stages of the mean squared error between each quantizer's input and output.
pub fn quantization_loss(stage_inputs: &[Tensor], stage_outputs: &[Tensor]) -> Result<Tensor> {
    if stage_inputs.len() != stage_outputs.len() || stage_inputs.is_empty() {
        return Err(Error::invalid(format!(
            "quantization loss needs equal non-empty stage lists, got {} and {}",
            stage_inputs.len(),
            stage_outputs.len()
        )));
    }
    let mut terms = Vec::with_capacity(stage_inputs.len());
    for (i, o) in stage_inputs.iter().zip(stage_outputs) {
        check_same(i, o, "quantizer stage")?;
        terms.push(ops::mse(i, o)?);
    }
    ops::sum_tensors(&terms)
}

/// [`quantization_loss`] on host-side latent sequences.
pub fn quantization_loss_latents(stage_inputs: &[LatentSequence], stage_outputs: &[LatentSequence]) -> Result<f64> {
    let t = |l: &LatentSequence| -> Result<Tensor> {
        Ok(Tensor::from_slice(l.values(), (l.frames(), l.dim()), &Device::Cpu)?.to_dtype(DType::F64)?)
    };
    let ins: Vec<Tensor> = stage_inputs.iter().map(t).collect::<Result<_>>()?;
    let outs: Vec<Tensor> = stage_outputs.iter().map(t).collect::<Result<_>>()?;
    ops::scalar(&quantization_loss(&ins, &outs)?)
}

fn check_structure(real: &DiscriminatorOutput, fake: &DiscriminatorOutput) -> Result<()> {
    if real.scores.len() != fake.scores.len() || real.features.len() != fake.features.len() {
        return Err(Error::invalid("real and fake discriminator outputs differ in structure"));
    }
    for (r, f) in real.features.iter().zip(&fake.features) {
        if r.len() != f.len() {
            return Err(Error::invalid("real and fake feature lists differ in length"));
        }
    }
    Ok(())
}

/// Least-squares discriminator loss: real scores toward 1, fake scores toward 0,
/// summed over sub-discriminators.
pub fn discriminator_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::invalid("discriminator loss needs matching non-empty score lists"));
    }
    let mut terms = Vec::with_capacity(real.len());
    for (r, f) in real.iter().zip(fake) {
        terms.push((r.affine(1.0, -1.0)?.sqr()?.mean_all()? + f.sqr()?.mean_all()?)?);
    }
    ops::sum_tensors(&terms)
}

/// Least-squares generator loss: fake scores toward 1, summed over sub-discriminators.
pub fn generator_loss(fake: &[Tensor]) -> Result<Tensor> {
    let terms: Vec<Tensor> = fake
        .iter()
        .map(|f| Ok(f.affine(1.0, -1.0)?.sqr()?.mean_all()?))
        .collect::<Result<_>>()?;
    ops::sum_tensors(&terms)
}

/// Mean over all corresponding feature maps of their mean absolute difference.
pub fn feature_matching_loss(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Result<Tensor> {
    let mut terms = Vec::new();
    for (r, f) in real.iter().zip(fake) {
        for (a, b) in r.iter().zip(f) {
            check_same(a, b, "feature map")?;
            terms.push(ops::mean_abs_diff(a, b)?);
        }
    }
    let n = terms.len();
    if n == 0 {
        return Err(Error::invalid("no feature maps to match"));
    }
    Ok((ops::sum_tensors(&terms)? / n as f64)?)
}

#[derive(Debug, Clone)]
pub struct AdversarialTerms {
    pub generator: Tensor,
    pub discriminator: Tensor,
    pub feature_matching: Tensor,
}

pub fn adversarial_terms(real: &DiscriminatorOutput, fake: &DiscriminatorOutput) -> Result<AdversarialTerms> {
    check_structure(real, fake)?;
    Ok(AdversarialTerms {
        generator: generator_loss(&fake.scores)?,
        discriminator: discriminator_loss(&real.scores, &fake.scores)?,
        feature_matching: feature_matching_loss(&real.features, &fake.features)?,
    })
}

/// Names of the generator terms, in report order.
pub const TERM_NAMES: [&str; 7] = ["amplitude", "phase", "mel", "complex", "quantization", "adversarial", "feature_matching"];

/// One optimization step's generator objective, as recorded in the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: String,
    pub step: usize,
    pub terms: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
    pub total: f64,
    /// Discriminator loss of the same step, when the discriminators are trained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<f64>,
    pub lr: f64,
}

impl LossReport {
    /// Builds a report whose total is the weighted sum of `terms`.
    pub fn new(stage: &str, step: usize, terms: BTreeMap<String, f64>, weights: BTreeMap<String, f64>, lr: f64) -> Result<Self> {
        let mut total = 0.0;
        for (name, value) in &terms {
            let w = weights
                .get(name)
                .ok_or_else(|| Error::invalid(format!("loss term {name} has no weight")))?;
            total += w * value;
        }
        if !total.is_finite() {
            return Err(Error::invalid(format!("non-finite loss at step {step}: {terms:?}")));
        }
        Ok(Self {
            stage: stage.to_string(),
            step,
            terms,
            weights,
            total,
            discriminator: None,
            lr,
        })
    }

    pub fn term(&self, name: &str) -> f64 {
        self.terms.get(name).copied().unwrap_or(0.0)
    }

    pub fn weight(&self, name: &str) -> f64 {
        self.weights.get(name).copied().unwrap_or(0.0)
    }
}
