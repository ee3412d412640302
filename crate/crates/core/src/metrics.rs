//! Log-spectral distance and anti-wrapping phase distances.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{read_wav, Manifest};
use crate::error::{Error, Result};
use crate::frontend::{log_floor, SignalConfig, SpectralPair, Stft};
use crate::losses::anti_wrap;
use crate::model::CodecModel;

/// Natural-log amplitude to dB: `20 log10(e^x) = x * 20 / ln 10`.
const NEPER_TO_DB: f64 = 20.0 / std::f64::consts::LN_10;

/// Constants used to convert phase distances to physical units, recorded in reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConventions {
    /// "20*log10 magnitude"
    pub lsd_scale: f64,
    /// Seconds per radian of frequency-axis phase difference: `fft_size / (2 pi sample_rate)`.
    pub gd_seconds_per_rad: f64,
    /// Radians per second per radian of time-axis phase difference: `sample_rate / frame_shift`.
    pub iaf_per_second: f64,
}

impl MetricConventions {
    pub fn new(sig: &SignalConfig) -> Self {
        Self {
            lsd_scale: 20.0,
            gd_seconds_per_rad: sig.fft_size as f64 / (2.0 * std::f64::consts::PI * sig.sample_rate as f64),
            iaf_per_second: sig.sample_rate as f64 / sig.frame_shift as f64,
        }
    }
}

/// Anti-wrapping phase distances, both raw (radians) and in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseDistances {
    pub ip: f64,
    pub gd: f64,
    pub iaf: f64,
    pub gd_rad: f64,
    pub iaf_rad: f64,
}

fn check_pairs(reference: &SpectralPair, test: &SpectralPair) -> Result<()> {
    if reference.frames() != test.frames() || reference.bins() != test.bins() {
        return Err(Error::invalid(format!(
            "spectra differ: {}x{} vs {}x{}",
            reference.frames(),
            reference.bins(),
            test.frames(),
            test.bins()
        )));
    }
    Ok(())
}

/// Frame-averaged RMS over bins of the dB log-magnitude difference.
pub fn lsd_spectra(reference: &SpectralPair, test: &SpectralPair) -> Result<f64> {
    check_pairs(reference, test)?;
    let bins = reference.bins();
    let (r, t) = (reference.log_amplitude(), test.log_amplitude());
    let mut total = 0.0;
    for f in 0..reference.frames() {
        let mut acc = 0.0;
        for k in f * bins..(f + 1) * bins {
            let d = NEPER_TO_DB * (r[k] as f64 - t[k] as f64);
            acc += d * d;
        }
        total += (acc / bins as f64).sqrt();
    }
    Ok(total / reference.frames() as f64)
}

/// Frames whose reference magnitude lies entirely at the amplitude floor.
pub fn silent_frames(reference: &SpectralPair) -> Vec<bool> {
    let floor = log_floor() + 1e-4;
    reference
        .log_amplitude()
        .chunks(reference.bins())
        .map(|row| row.iter().all(|v| *v <= floor))
        .collect()
}

/// Phase distances between two spectra, skipping frames that are silent in the reference.
pub fn awpd_spectra(reference: &SpectralPair, test: &SpectralPair, sig: &SignalConfig) -> Result<PhaseDistances> {
    check_pairs(reference, test)?;
    let bins = reference.bins();
    let silent = silent_frames(reference);
    let err: Vec<f64> = reference
        .phase()
        .iter()
        .zip(test.phase())
        .map(|(r, t)| *t as f64 - *r as f64)
        .collect();
    let (mut ip, mut n_ip) = (0.0, 0usize);
    let (mut gd, mut n_gd) = (0.0, 0usize);
    let (mut iaf, mut n_iaf) = (0.0, 0usize);
    for f in 0..reference.frames() {
        if silent[f] {
            continue;
        }
        let row = &err[f * bins..(f + 1) * bins];
        for k in 0..bins {
            ip += anti_wrap(row[k]);
            n_ip += 1;
            if k > 0 {
                gd += anti_wrap(row[k] - row[k - 1]);
                n_gd += 1;
            }
        }
        if f > 0 && !silent[f - 1] {
            let prev = &err[(f - 1) * bins..f * bins];
            for k in 0..bins {
                iaf += anti_wrap(row[k] - prev[k]);
                n_iaf += 1;
            }
        }
    }
    if n_ip == 0 {
        return Err(Error::invalid("reference is silent in every frame; phase distances are undefined"));
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    let conv = MetricConventions::new(sig);
    let (gd_rad, iaf_rad) = (mean(gd, n_gd), mean(iaf, n_iaf));
    Ok(PhaseDistances {
        ip: mean(ip, n_ip),
        gd: gd_rad * conv.gd_seconds_per_rad,
        iaf: iaf_rad * conv.iaf_per_second,
        gd_rad,
        iaf_rad,
    })
}

fn analyze_both(reference: &[f32], test: &[f32], sig: &SignalConfig) -> Result<(SpectralPair, SpectralPair)> {
    let n = reference.len().min(test.len());
    if n < sig.frame_length {
        return Err(Error::invalid(format!(
            "metrics need at least one frame ({} samples), got {n}",
            sig.frame_length
        )));
    }
    if reference[..n].iter().all(|s| *s == 0.0) {
        return Err(Error::invalid("reference signal is silent"));
    }
    let stft = Stft::new(*sig)?;
    Ok((stft.analyze(&reference[..n])?, stft.analyze(&test[..n])?))
}

/// Log-spectral distance in dB, trimming both signals to the shorter length.
pub fn lsd(reference: &[f32], test: &[f32], sig: &SignalConfig) -> Result<f64> {
    let (r, t) = analyze_both(reference, test, sig)?;
    lsd_spectra(&r, &t)
}

/// Anti-wrapping phase distances, trimming both signals to the shorter length.
pub fn awpd(reference: &[f32], test: &[f32], sig: &SignalConfig) -> Result<PhaseDistances> {
    let (r, t) = analyze_both(reference, test, sig)?;
    awpd_spectra(&r, &t, sig)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// dB
    pub lsd: f64,
    /// radians
    pub awpd_ip: f64,
    /// seconds
    pub awpd_gd: f64,
    /// radians per second
    pub awpd_iaf: f64,
    /// Unscaled group-delay distance, radians.
    pub awpd_gd_rad: f64,
    /// Unscaled instantaneous-angular-frequency distance, radians.
    pub awpd_iaf_rad: f64,
    pub bitrate_kbps: f64,
}

impl MetricReport {
    fn from_parts(lsd: f64, p: &PhaseDistances, bitrate_kbps: f64) -> Self {
        Self {
            lsd,
            awpd_ip: p.ip,
            awpd_gd: p.gd,
            awpd_iaf: p.iaf,
            awpd_gd_rad: p.gd_rad,
            awpd_iaf_rad: p.iaf_rad,
            bitrate_kbps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub id: String,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub utterances: Vec<UtteranceMetrics>,
    pub aggregate: MetricReport,
    pub conventions: MetricConventions,
    pub skipped: Vec<String>,
    /// Mean score from the external MOS predictor hook, when configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utmos: Option<f64>,
}

impl CorpusReport {
    /// Fixed-width table for terminals.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<24} {:>9} {:>10} {:>12} {:>12} {:>8}\n",
            "utterance", "LSD(dB)", "IP(rad)", "GD(s)", "IAF(rad/s)", "kbps"
        );
        let mut row = |id: &str, m: &MetricReport| {
            s.push_str(&format!(
                "{:<24} {:>9.4} {:>10.4} {:>12.4e} {:>12.2} {:>8.2}\n",
                id, m.lsd, m.awpd_ip, m.awpd_gd, m.awpd_iaf, m.bitrate_kbps
            ));
        };
        for u in &self.utterances {
            row(&u.id, &u.metrics);
        }
        row("mean", &self.aggregate);
        if let Some(u) = self.utmos {
            s.push_str(&format!("UTMOS (external): {u:.3}\n"));
        }
        s
    }

    /// One JSON record per utterance followed by one aggregate record.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for u in &self.utterances {
            out.push_str(&serde_json::to_string(&serde_json::json!({"kind": "utterance", "record": u}))?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&serde_json::json!({
            "kind": "aggregate",
            "record": self.aggregate,
            "conventions": self.conventions,
            "skipped": self.skipped,
            "utmos": self.utmos,
        }))?);
        out.push('\n');
        Ok(out)
    }
}

/// Encodes and decodes one waveform and scores the result against it.
pub fn evaluate_waveform(model: &CodecModel, waveform: &[f32]) -> Result<(MetricReport, Vec<f32>)> {
    let sig = *model.signal();
    let stft = Stft::new(sig)?;
    let enc = model.encode_waveform(&stft, waveform)?;
    let decoded = model.decode_tokens(&stft, &enc.tokens, enc.original_samples)?;
    let (r, t) = analyze_both(waveform, &decoded, &sig)?;
    let report = MetricReport::from_parts(lsd_spectra(&r, &t)?, &awpd_spectra(&r, &t, &sig)?, model.bitrate_kbps());
    Ok((report, decoded))
}

/// Mean of per-utterance metrics over every readable manifest entry. When
/// `decoded_dir` is given, decoded audio is written there as `<id>.wav`.
pub fn evaluate_corpus(model: &CodecModel, manifest: &Manifest, decoded_dir: Option<&Path>) -> Result<CorpusReport> {
    if manifest.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty manifest"));
    }
    let sig = *model.signal();
    let results: Vec<(String, Result<MetricReport>)> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let r = read_wav(&e.path, sig.sample_rate).and_then(|w| {
                let (m, decoded) = evaluate_waveform(model, &w)?;
                if let Some(dir) = decoded_dir {
                    crate::data::write_wav(&dir.join(format!("{}.wav", e.id)), &decoded, sig.sample_rate)?;
                }
                Ok(m)
            });
            (e.id.clone(), r)
        })
        .collect();
    let mut utterances = Vec::new();
    let mut skipped = Vec::new();
    for (id, r) in results {
        match r {
            Ok(metrics) => utterances.push(UtteranceMetrics { id, metrics }),
            Err(e) => {
                log::warn!("skipping {id}: {e}");
                skipped.push(id);
            }
        }
    }
    if utterances.is_empty() {
        return Err(Error::invalid("every manifest entry failed to evaluate"));
    }
    let n = utterances.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| utterances.iter().map(|u| f(&u.metrics)).sum::<f64>() / n;
    let aggregate = MetricReport {
        lsd: mean(|m| m.lsd),
        awpd_ip: mean(|m| m.awpd_ip),
        awpd_gd: mean(|m| m.awpd_gd),
        awpd_iaf: mean(|m| m.awpd_iaf),
        awpd_gd_rad: mean(|m| m.awpd_gd_rad),
        awpd_iaf_rad: mean(|m| m.awpd_iaf_rad),
        bitrate_kbps: model.bitrate_kbps(),
    };
    Ok(CorpusReport {
        utterances,
        aggregate,
        conventions: MetricConventions::new(&sig),
        skipped,
        utmos: None,
    })
}

/// Runs an external MOS predictor as `command <dir>` and parses the last line of
/// its standard output as the mean score.
pub fn run_utmos_hook(command: &str, decoded_dir: &Path) -> Result<f64> {
    let mut parts = command.split_whitespace();
    let program = parts
        .next()
        .ok_or_else(|| Error::Config("empty UTMOS hook command".into()))?;
    let output = std::process::Command::new(program)
        .args(parts)
        .arg(decoded_dir)
        .output()
        .map_err(|e| Error::io(program, e))?;
    if !output.status.success() {
        return Err(Error::invalid(format!(
            "UTMOS hook exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    stdout
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .and_then(|l| l.trim().parse::<f64>().ok())
        .ok_or_else(|| Error::invalid(format!("UTMOS hook printed no score: {stdout:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sig() -> SignalConfig {
        SignalConfig {
            sample_rate: 16_000,
            frame_length: 64,
            frame_shift: 16,
            fft_size: 128,
        }
    }

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    #[test]
    fn identity_is_zero() {
        let x = noise(2000, 1);
        assert_eq!(lsd(&x, &x, &sig()).unwrap(), 0.0);
        let p = awpd(&x, &x, &sig()).unwrap();
        assert_eq!((p.ip, p.gd, p.iaf), (0.0, 0.0, 0.0));
    }

    #[test]
    fn doubling_is_six_db() {
        let x = noise(2000, 2);
        let y: Vec<f32> = x.iter().map(|v| 2.0 * v).collect();
        let d = lsd(&y, &x, &sig()).unwrap();
        assert!((d - 20.0 * 2f64.log10()).abs() < 1e-3, "{d}");
    }

    #[test]
    fn lsd_matches_two_loop_oracle() {
        let (x, y) = (noise(1500, 3), noise(1500, 4));
        let stft = Stft::new(sig()).unwrap();
        let (a, b) = (stft.analyze(&x).unwrap(), stft.analyze(&y).unwrap());
        let mut oracle = 0.0;
        for f in 0..a.frames() {
            let mut s = 0.0;
            for k in 0..a.bins() {
                let i = f * a.bins() + k;
                let ma = (a.log_amplitude()[i] as f64).exp();
                let mb = (b.log_amplitude()[i] as f64).exp();
                s += (20.0 * ma.log10() - 20.0 * mb.log10()).powi(2);
            }
            oracle += (s / a.bins() as f64).sqrt();
        }
        oracle /= a.frames() as f64;
        let d = lsd(&x, &y, &sig()).unwrap();
        assert!(d > 0.0);
        assert!((d - oracle).abs() < 1e-9 * oracle.max(1.0));
    }

    #[test]
    fn two_pi_shift_is_invisible() {
        let x = noise(1000, 5);
        let stft = Stft::new(sig()).unwrap();
        let a = stft.analyze(&x).unwrap();
        let mut b = a.clone();
        b.phase_mut().iter_mut().for_each(|p| *p += 2.0 * std::f32::consts::PI);
        let p = awpd_spectra(&a, &b, &sig()).unwrap();
        assert!(p.ip < 1e-5 && p.gd_rad < 1e-5 && p.iaf_rad < 1e-5);
    }

    #[test]
    fn periodic_shift_keeps_phase() {
        // Period of 32 samples divides both the hop and the FFT size.
        let period = 32;
        let x: Vec<f32> = (0..3000)
            .map(|n| {
                let t = (n % period) as f32 / period as f32;
                (2.0 * std::f32::consts::PI * t).sin() + 0.5 * (4.0 * std::f32::consts::PI * t).cos()
            })
            .collect();
        let shifted: Vec<f32> = x[period..].to_vec();
        let p = awpd(&x[..2900], &shifted[..2900], &sig()).unwrap();
        assert!(p.ip < 0.3, "{}", p.ip);
    }

    #[test]
    fn unit_conversion_and_errors() {
        let c = MetricConventions::new(&SignalConfig::default());
        assert!((c.gd_seconds_per_rad - 1024.0 / (2.0 * std::f64::consts::PI * 48_000.0)).abs() < 1e-15);
        assert_eq!(c.iaf_per_second, 1200.0);
        assert!(lsd(&[0.1; 10], &[0.1; 10], &sig()).is_err());
        assert!(lsd(&[0.0; 500], &[0.1; 500], &sig()).is_err());
    }

    #[test]
    fn lsd_invariant_to_whole_hop_shift() {
        let x = noise(3000, 7);
        let y = noise(3000, 8);
        let pad = 16 * 5;
        let xs: Vec<f32> = std::iter::repeat_n(0.0, pad).chain(x.iter().copied()).collect();
        let ys: Vec<f32> = std::iter::repeat_n(0.0, pad).chain(y.iter().copied()).collect();
        let a = lsd(&x, &y, &sig()).unwrap();
        let b = lsd(&xs, &ys, &sig()).unwrap();
        // Shifting adds silent frames at the start; compare the shared frames directly.
        let stft = Stft::new(sig()).unwrap();
        let (fa, fb) = (stft.analyze(&x).unwrap(), stft.analyze(&y).unwrap());
        let (ga, gb) = (stft.analyze(&xs).unwrap(), stft.analyze(&ys).unwrap());
        let skip = pad / 16;
        let inner = 10..fa.frames() - 10;
        let len = inner.len();
        let l1 = lsd_spectra(&fa.slice_frames(10, len).unwrap(), &fb.slice_frames(10, len).unwrap()).unwrap();
        let l2 = lsd_spectra(&ga.slice_frames(10 + skip, len).unwrap(), &gb.slice_frames(10 + skip, len).unwrap()).unwrap();
        assert!((l1 - l2).abs() < 1e-4, "{l1} vs {l2}");
        assert!(a > 0.0 && b > 0.0);
    }
}
