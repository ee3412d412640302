//! Waveform to amplitude/phase spectra and back.
//!
//! Analysis frames are centered: frame `t` is centered on sample `t * frame_shift`
//! of the input, with reflect padding of `frame_length / 2` at both ends. A clip of
//! `n` samples therefore yields `ceil(n / frame_shift)` frames, and synthesis returns
//! `frames * frame_shift` samples whose first `n` reproduce the input.

use std::f64::consts::PI;
use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magnitude floor applied before taking the natural log.
pub const AMPLITUDE_FLOOR: f64 = 1e-5;

/// Natural log of [`AMPLITUDE_FLOOR`], the smallest representable log-amplitude.
pub fn log_floor() -> f32 {
    AMPLITUDE_FLOOR.ln() as f32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalConfig {
    pub sample_rate: u32,
    pub frame_length: usize,
    pub frame_shift: usize,
    pub fft_size: usize,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            sample_rate: 48_000,
            frame_length: 320,
            frame_shift: 40,
            fft_size: 1024,
        }
    }
}

impl SignalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.frame_length == 0 || self.frame_shift == 0 {
            return Err(Error::Config(format!("signal config has a zero field: {self:?}")));
        }
        if self.frame_length % self.frame_shift != 0 {
            return Err(Error::Config(format!(
                "frame_shift {} must divide frame_length {}",
                self.frame_shift, self.frame_length
            )));
        }
        if self.fft_size < self.frame_length {
            return Err(Error::Config(format!(
                "fft_size {} is smaller than frame_length {}",
                self.fft_size, self.frame_length
            )));
        }
        if self.fft_size % 2 != 0 {
            return Err(Error::Config(format!("fft_size {} must be even", self.fft_size)));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of analysis frames for a clip of `num_samples` samples.
    pub fn frame_count(&self, num_samples: usize) -> usize {
        num_samples.div_ceil(self.frame_shift)
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.frame_shift as f64
    }
}

/// Aligned log-amplitude and wrapped-phase spectrograms, stored row-major as
/// `[frames x bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralPair {
    frames: usize,
    bins: usize,
    log_amplitude: Vec<f32>,
    phase: Vec<f32>,
}

impl SpectralPair {
    pub fn new(frames: usize, bins: usize, log_amplitude: Vec<f32>, phase: Vec<f32>) -> Result<Self> {
        let expected = frames * bins;
        if log_amplitude.len() != expected || phase.len() != expected {
            return Err(Error::invalid(format!(
                "spectral pair of {frames}x{bins} needs {expected} entries, got {} amplitude and {} phase",
                log_amplitude.len(),
                phase.len()
            )));
        }
        Ok(Self {
            frames,
            bins,
            log_amplitude,
            phase,
        })
    }

    /// Silent spectra: amplitude at the floor, zero phase.
    pub fn silent(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            log_amplitude: vec![log_floor(); frames * bins],
            phase: vec![0.0; frames * bins],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn log_amplitude(&self) -> &[f32] {
        &self.log_amplitude
    }

    pub fn phase(&self) -> &[f32] {
        &self.phase
    }

    pub fn log_amplitude_mut(&mut self) -> &mut [f32] {
        &mut self.log_amplitude
    }

    pub fn phase_mut(&mut self) -> &mut [f32] {
        &mut self.phase
    }

    pub fn into_parts(self) -> (Vec<f32>, Vec<f32>) {
        (self.log_amplitude, self.phase)
    }

    /// Frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames {
            return Err(Error::invalid(format!(
                "frame window {start}..{} exceeds {} frames",
                start + len,
                self.frames
            )));
        }
        let range = start * self.bins..(start + len) * self.bins;
        Ok(Self {
            frames: len,
            bins: self.bins,
            log_amplitude: self.log_amplitude[range.clone()].to_vec(),
            phase: self.phase[range].to_vec(),
        })
    }

    /// Replicates the last frame until the frame count is a multiple of `multiple`.
    /// Returns the padded pair; the original count is `self.frames()`.
    pub fn pad_frames_to_multiple(&self, multiple: usize) -> Result<Self> {
        if multiple == 0 {
            return Err(Error::invalid("frame multiple must be positive"));
        }
        if self.frames == 0 {
            return Ok(self.clone());
        }
        let target = self.frames.div_ceil(multiple) * multiple;
        let mut out = self.clone();
        let last = (self.frames - 1) * self.bins..self.frames * self.bins;
        for _ in self.frames..target {
            out.log_amplitude.extend_from_within(last.clone());
            out.phase.extend_from_within(last.clone());
        }
        out.frames = target;
        Ok(out)
    }

    pub fn truncate_frames(&mut self, frames: usize) {
        if frames < self.frames {
            self.frames = frames;
            self.log_amplitude.truncate(frames * self.bins);
            self.phase.truncate(frames * self.bins);
        }
    }
}

/// Maps the f32 image of `-pi` (and anything below it) onto `pi`, so stored
/// phases stay in `(-pi, pi]` after narrowing.
pub fn fold_phase_f32(p: f32) -> f32 {
    if p <= -std::f32::consts::PI {
        std::f32::consts::PI
    } else {
        p
    }
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_phase(x: f64) -> f64 {
    let mut y = x.sin().atan2(x.cos());
    if y <= -PI {
        y = PI;
    }
    y
}

fn reflect_index(j: isize, len: usize) -> usize {
    let last = len as isize - 1;
    let mut j = j;
    // A single reflection suffices because padding never exceeds len - 1.
    if j < 0 {
        j = -j;
    }
    if j > last {
        j = 2 * last - j;
    }
    j as usize
}

/// Planned STFT/iSTFT pair for a fixed [`SignalConfig`].
pub struct Stft {
    cfg: SignalConfig,
    window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    pub fn new(cfg: SignalConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(Self {
            cfg,
            window: hann_window(cfg.frame_length),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    pub fn config(&self) -> &SignalConfig {
        &self.cfg
    }

    pub fn analyze(&self, waveform: &[f32]) -> Result<SpectralPair> {
        let cfg = &self.cfg;
        if waveform.is_empty() {
            return Err(Error::invalid("cannot analyze an empty waveform"));
        }
        if waveform.len() < cfg.frame_length {
            return Err(Error::invalid(format!(
                "waveform of {} samples is shorter than one frame ({})",
                waveform.len(),
                cfg.frame_length
            )));
        }
        let frames = cfg.frame_count(waveform.len());
        let bins = cfg.num_bins();
        let half = (cfg.frame_length / 2) as isize;
        let mut log_amplitude = Vec::with_capacity(frames * bins);
        let mut phase = Vec::with_capacity(frames * bins);
        let mut buf = self.forward.make_input_vec();
        let mut spec = self.forward.make_output_vec();
        for t in 0..frames {
            buf.iter_mut().for_each(|v| *v = 0.0);
            let start = (t * cfg.frame_shift) as isize - half;
            for (m, w) in self.window.iter().enumerate() {
                let idx = reflect_index(start + m as isize, waveform.len());
                buf[m] = waveform[idx] as f64 * w;
            }
            self.forward
                .process(&mut buf, &mut spec)
                .map_err(|e| Error::invalid(format!("fft failed: {e}")))?;
            for c in &spec {
                let mag = c.norm().max(AMPLITUDE_FLOOR);
                log_amplitude.push(mag.ln() as f32);
                phase.push(if c.norm() == 0.0 {
                    0.0
                } else {
                    fold_phase_f32(wrap_phase(c.im.atan2(c.re)) as f32)
                });
            }
        }
        SpectralPair::new(frames, bins, log_amplitude, phase)
    }

    pub fn synthesize(&self, pair: &SpectralPair) -> Result<Vec<f32>> {
        let cfg = &self.cfg;
        if pair.bins() != cfg.num_bins() {
            return Err(Error::invalid(format!(
                "spectral pair has {} bins, config expects {}",
                pair.bins(),
                cfg.num_bins()
            )));
        }
        let frames = pair.frames();
        let out_len = frames * cfg.frame_shift;
        let half = cfg.frame_length / 2;
        let mut acc = vec![0.0f64; out_len];
        let mut env = vec![0.0f64; out_len];
        let mut spec = self.inverse.make_input_vec();
        let mut buf = self.inverse.make_output_vec();
        let norm = 1.0 / cfg.fft_size as f64;
        for t in 0..frames {
            let row = t * pair.bins()..(t + 1) * pair.bins();
            for ((c, &la), &ph) in spec
                .iter_mut()
                .zip(&pair.log_amplitude()[row.clone()])
                .zip(&pair.phase()[row])
            {
                let mag = (la as f64).exp();
                let ph = ph as f64;
                *c = realfft::num_complex::Complex::new(mag * ph.cos(), mag * ph.sin());
            }
            // DC and Nyquist bins of a real signal carry no imaginary part.
            spec[0].im = 0.0;
            let last = spec.len() - 1;
            spec[last].im = 0.0;
            self.inverse
                .process(&mut spec, &mut buf)
                .map_err(|e| Error::invalid(format!("inverse fft failed: {e}")))?;
            for (m, w) in self.window.iter().enumerate() {
                let n = (t * cfg.frame_shift + m) as isize - half as isize;
                if n < 0 || n as usize >= out_len {
                    continue;
                }
                acc[n as usize] += buf[m] * norm * w;
                env[n as usize] += w * w;
            }
        }
        Ok(acc
            .iter()
            .zip(&env)
            .map(|(a, e)| if *e > 1e-11 { (a / e) as f32 } else { 0.0 })
            .collect())
    }
}

/// One-shot analysis with a freshly planned transform.
pub fn analyze(waveform: &[f32], cfg: &SignalConfig) -> Result<SpectralPair> {
    Stft::new(*cfg)?.analyze(waveform)
}

/// One-shot synthesis with a freshly planned transform.
pub fn synthesize(pair: &SpectralPair, cfg: &SignalConfig) -> Result<Vec<f32>> {
    Stft::new(*cfg)?.synthesize(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-0.5f32..0.5)).collect()
    }

    fn rel_err(a: &[f32], b: &[f32]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
        let den: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum();
        (num / den).sqrt()
    }

    #[test]
    fn paper_crop_gives_199_frames() {
        let cfg = SignalConfig::default();
        let pair = analyze(&noise(7960, 1), &cfg).unwrap();
        assert_eq!(pair.frames(), 199);
        assert_eq!(pair.bins(), 513);
        assert_eq!(pair.pad_frames_to_multiple(8).unwrap().frames(), 200);
    }

    #[test]
    fn frame_count_is_ceil() {
        let cfg = SignalConfig::default();
        assert_eq!(cfg.frame_count(320), 8);
        assert_eq!(cfg.frame_count(321), 9);
        assert_eq!(cfg.frame_count(48_000), 1200);
    }

    #[test]
    fn zero_waveform_is_floor_and_zero_phase() {
        let cfg = SignalConfig::default();
        let pair = analyze(&vec![0.0; 2000], &cfg).unwrap();
        assert!(pair.log_amplitude().iter().all(|&v| v == log_floor()));
        assert!(pair.phase().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_empty_and_short() {
        let cfg = SignalConfig::default();
        assert!(matches!(analyze(&[], &cfg), Err(Error::InvalidInput(_))));
        assert!(matches!(analyze(&[0.1; 100], &cfg), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn bin_center_sine_peaks_at_its_bin() {
        let cfg = SignalConfig::default();
        let k = 37usize;
        let freq = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
        let wave: Vec<f32> = (0..4800)
            .map(|n| (2.0 * PI * freq * n as f64 / cfg.sample_rate as f64).sin() as f32 * 0.5)
            .collect();
        let pair = analyze(&wave, &cfg).unwrap();
        // Oracle: direct DFT summation of one interior windowed frame.
        let t = 50;
        let win = hann_window(cfg.frame_length);
        let start = t * cfg.frame_shift - cfg.frame_length / 2;
        let oracle: Vec<f64> = (0..cfg.num_bins())
            .map(|b| {
                let (mut re, mut im) = (0.0, 0.0);
                for m in 0..cfg.frame_length {
                    let x = wave[start + m] as f64 * win[m];
                    let ang = -2.0 * PI * (b * m) as f64 / cfg.fft_size as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect();
        let oracle_peak = oracle
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(oracle_peak, k);
        let row = &pair.log_amplitude()[t * pair.bins()..(t + 1) * pair.bins()];
        for b in 0..pair.bins() {
            let got = (row[b] as f64).exp();
            assert!((got - oracle[b].max(AMPLITUDE_FLOOR)).abs() <= 1e-4 * oracle[k]);
        }
        for t in 5..pair.frames() - 5 {
            let row = &pair.log_amplitude()[t * pair.bins()..(t + 1) * pair.bins()];
            let peak = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(peak, k, "frame {t}");
        }
    }

    #[test]
    fn round_trip_reconstructs_noise() {
        let cfg = SignalConfig::default();
        for (len, seed) in [(640, 3), (7960, 4), (12_345, 5)] {
            let x = noise(len, seed);
            let y = synthesize(&analyze(&x, &cfg).unwrap(), &cfg).unwrap();
            assert_eq!(y.len(), cfg.frame_count(len) * cfg.frame_shift);
            let err = rel_err(&y[..len], &x);
            assert!(err < 1e-4, "len {len}: {err}");
            assert!(20.0 * err.log10() < -60.0);
        }
    }

    #[test]
    fn silent_spectra_synthesize_near_zero() {
        let cfg = SignalConfig::default();
        let y = synthesize(&SpectralPair::silent(20, cfg.num_bins()), &cfg).unwrap();
        let peak = y.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!((peak as f64) < AMPLITUDE_FLOOR * cfg.fft_size as f64);
    }

    #[test]
    fn synthesize_rejects_wrong_bins() {
        let cfg = SignalConfig::default();
        let pair = SpectralPair::silent(4, 10);
        assert!(matches!(synthesize(&pair, &cfg), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn config_validation() {
        assert!(SignalConfig::default().validate().is_ok());
        let bad = SignalConfig { frame_shift: 30, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SignalConfig { fft_size: 256, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn edge_padding_replicates_last_frame() {
        let pair = SpectralPair::new(3, 2, vec![1., 2., 3., 4., 5., 6.], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let padded = pair.pad_frames_to_multiple(4).unwrap();
        assert_eq!(padded.frames(), 4);
        assert_eq!(&padded.log_amplitude()[6..], &[5., 6.]);
        assert_eq!(&padded.phase()[6..], &[0.5, 0.6]);
    }

    proptest::proptest! {
        #[test]
        fn phase_in_range_and_amplitude_floored(seed in 0u64..1000, len in 320usize..2000) {
            let cfg = SignalConfig { sample_rate: 16_000, frame_length: 64, frame_shift: 16, fft_size: 128 };
            let pair = analyze(&noise(len, seed), &cfg).unwrap();
            for &p in pair.phase() {
                proptest::prop_assert!(p > -std::f32::consts::PI && p <= std::f32::consts::PI);
            }
            for &a in pair.log_amplitude() {
                proptest::prop_assert!(a >= log_floor());
            }
            proptest::prop_assert_eq!(pair.frames(), cfg.frame_count(len));
        }
    }
}
