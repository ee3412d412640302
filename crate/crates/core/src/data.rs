//! Manifests, WAV I/O, and a synthetic corpus generator.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::rng_for;

/// One manifest line: `{"id": ..., "path": ..., "duration": seconds}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    #[serde(default)]
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Reads a JSON-lines manifest. Relative audio paths are resolved against the
    /// manifest's directory; blank lines are ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), n + 1)))?;
            if entry.path.is_relative() {
                entry.path = base.join(&entry.path);
            }
            entries.push(entry);
        }
        let mut ids: Vec<&str> = entries.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate utterance id {:?} in {}", w[0], path.display())));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Reads a mono WAV file (integer PCM or 32-bit float) at `sample_rate`.
pub fn read_wav(path: &Path, sample_rate: u32) -> Result<Vec<f32>> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::invalid(format!(
            "{} has {} channels; only mono audio is supported",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != sample_rate {
        return Err(Error::invalid(format!(
            "{} is sampled at {} Hz, expected {sample_rate} Hz (resampling is not supported)",
            path.display(),
            spec.sample_rate
        )));
    }
    match spec.sample_format {
        hound::SampleFormat::Float => Ok(reader.into_samples::<f32>().collect::<std::result::Result<_, _>>()?),
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| Ok(s? as f32 * scale))
                .collect()
        }
    }
}

/// Writes mono 32-bit float WAV.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for s in samples {
        w.write_sample(*s)?;
    }
    w.finalize()?;
    Ok(())
}

/// Writes mono 16-bit PCM WAV, clipping to [-1, 1].
pub fn write_wav_i16(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

/// A voiced, speech-like test signal: a gliding fundamental with harmonics shaped by
/// two moving resonances, a syllabic amplitude envelope, and a little breath noise.
pub fn speech_like(samples: usize, sample_rate: u32, seed: u64) -> Vec<f32> {
    let mut rng = rng_for(seed, "speech-like");
    let sr = sample_rate as f64;
    let f0_start = rng.random_range(90.0..220.0);
    let f0_end = f0_start * rng.random_range(0.7..1.4);
    let formants = [
        (rng.random_range(300.0..800.0), rng.random_range(500.0..900.0)),
        (rng.random_range(900.0..2400.0), rng.random_range(1200.0..2800.0)),
    ];
    let syllable_rate = rng.random_range(3.0..6.0);
    let nyquist = sr / 2.0;
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(samples);
    for n in 0..samples {
        let t = n as f64 / sr;
        let frac = n as f64 / samples.max(1) as f64;
        let f0 = f0_start + (f0_end - f0_start) * frac;
        phase += 2.0 * std::f64::consts::PI * f0 / sr;
        let f1 = formants[0].0 + (formants[0].1 - formants[0].0) * frac;
        let f2 = formants[1].0 + (formants[1].1 - formants[1].0) * frac;
        let mut v = 0.0;
        let mut h = 1;
        while h as f64 * f0 < nyquist * 0.9 && h <= 40 {
            let fh = h as f64 * f0;
            let gain = 1.0 / (1.0 + ((fh - f1) / 150.0).powi(2)) + 0.6 / (1.0 + ((fh - f2) / 250.0).powi(2)) + 0.02;
            v += gain * (h as f64 * phase).sin() / h as f64;
            h += 1;
        }
        let env = 0.55 + 0.45 * (2.0 * std::f64::consts::PI * syllable_rate * t).sin();
        let noise: f64 = rng.random_range(-1.0..1.0);
        out.push((0.25 * env * v + 0.003 * noise) as f32);
    }
    out
}

/// Writes `count` speech-like clips of random length in `[min_seconds, max_seconds]`
/// plus `manifest.jsonl` into `dir`, returning the manifest path.
pub fn write_toy_corpus(
    dir: &Path,
    count: usize,
    sample_rate: u32,
    min_seconds: f64,
    max_seconds: f64,
    seed: u64,
) -> Result<PathBuf> {
    if count == 0 || min_seconds <= 0.0 || max_seconds < min_seconds {
        return Err(Error::invalid("toy corpus needs count > 0 and 0 < min_seconds <= max_seconds"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = rng_for(seed, "toy-corpus");
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let secs = rng.random_range(min_seconds..=max_seconds);
        let n = (secs * sample_rate as f64).round() as usize;
        let wave = speech_like(n, sample_rate, rng.random());
        let name = format!("clip{i:03}.wav");
        write_wav_i16(&dir.join(&name), &wave, sample_rate)?;
        entries.push(ManifestEntry {
            id: format!("clip{i:03}"),
            path: PathBuf::from(name),
            duration: n as f64 / sample_rate as f64,
        });
    }
    let manifest_path = dir.join("manifest.jsonl");
    let mut f = std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for e in &entries {
        writeln!(f, "{}", serde_json::to_string(e)?).map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_toy_corpus(dir.path(), 3, 16_000, 0.1, 0.2, 1).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.len(), 3);
        for e in &m.entries {
            assert!(e.path.is_absolute() || e.path.starts_with(dir.path()));
            let w = read_wav(&e.path, 16_000).unwrap();
            assert_eq!(w.len() as f64, (e.duration * 16_000.0).round());
            assert!(w.iter().all(|s| s.abs() <= 1.0));
            assert!(w.iter().map(|s| s * s).sum::<f32>() > 0.0);
        }
        assert!(read_wav(&m.entries[0].path, 48_000).is_err());
    }

    #[test]
    fn float_wav_round_trip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x = vec![0.5f32, -0.25, 0.125];
        write_wav(&p, &x, 8000).unwrap();
        assert_eq!(read_wav(&p, 8000).unwrap(), x);
        let mp = dir.path().join("m.jsonl");
        std::fs::write(&mp, "{\"id\":\"a\",\"path\":\"a.wav\"}\n\n{\"id\":\"a\",\"path\":\"a.wav\"}\n").unwrap();
        assert!(Manifest::load(&mp).is_err());
    }

    #[test]
    fn speech_like_is_deterministic() {
        assert_eq!(speech_like(500, 16_000, 3), speech_like(500, 16_000, 3));
        assert_ne!(speech_like(500, 16_000, 3), speech_like(500, 16_000, 4));
    }
}
