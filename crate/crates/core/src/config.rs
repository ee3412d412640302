//! Run configuration: every hyperparameter in one TOML document with dotted
//! sections, plus `key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::discriminators::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::frontend::SignalConfig;
use crate::losses::LossWeights;
use crate::model::CodecConfig;

pub const PAPER_PRESET: &str = include_str!("../configs/paper.toml");
pub const MINI_PRESET: &str = include_str!("../configs/mini.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Training crop in samples; must be a multiple of `signal.frame_shift`.
    pub crop_length: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub initial_lr: f64,
    pub lr_decay_per_epoch: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    /// Optimizer steps in each stage.
    pub steps_per_stage: usize,
    pub seed: u64,
    /// Codebook EMA decay.
    pub ema_decay: f64,
    /// Smoothed usage below which a codeword is reseeded.
    pub dead_code_threshold: f64,
    /// Encoder/quantizer hash check interval during the individual stage.
    pub freeze_check_every: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            crop_length: 7960,
            batch_size: 16,
            beta1: 0.8,
            beta2: 0.99,
            initial_lr: 2e-4,
            lr_decay_per_epoch: 0.999,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            steps_per_stage: 1000,
            seed: 1234,
            ema_decay: 0.99,
            dead_code_threshold: 1e-2,
            freeze_check_every: 10,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, sig: &SignalConfig) -> Result<()> {
        if self.crop_length == 0 || self.crop_length % sig.frame_shift != 0 {
            return Err(Error::Config(format!(
                "train.crop_length {} must be a positive multiple of frame_shift {}",
                self.crop_length, sig.frame_shift
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(Error::Config("train.lr_decay_per_epoch must be in (0, 1]".into()));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("ema_decay", self.ema_decay)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("train.{name} must be in [0, 1)")));
            }
        }
        if !(self.initial_lr > 0.0) || self.weight_decay < 0.0 || !(self.adam_eps > 0.0) || self.grad_clip < 0.0 {
            return Err(Error::Config("train.initial_lr and adam_eps must be positive; weight_decay and grad_clip non-negative".into()));
        }
        if self.freeze_check_every == 0 {
            return Err(Error::Config("train.freeze_check_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate after `epoch` completed passes over the corpus.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.initial_lr * self.lr_decay_per_epoch.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub n_mels: usize,
    pub fmin: f64,
    /// Upper edge in Hz; 0 means the Nyquist frequency.
    pub fmax: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            fmin: 0.0,
            fmax: 0.0,
        }
    }
}

impl MelConfig {
    pub fn upper(&self, sig: &SignalConfig) -> f64 {
        if self.fmax > 0.0 {
            self.fmax
        } else {
            sig.sample_rate as f64 / 2.0
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// External MOS predictor, run as `<command> <decoded-dir>`; empty disables it.
    pub utmos_command: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub signal: SignalConfig,
    pub codec: CodecConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossWeights,
    pub mel: MelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?} descends into a non-table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies overrides, and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    /// Built-in presets: `paper` or `mini`.
    pub fn preset(name: &str, overrides: &[String]) -> Result<Self> {
        match name {
            "paper" => Self::from_toml_str(PAPER_PRESET, overrides),
            "mini" => Self::from_toml_str(MINI_PRESET, overrides),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected paper or mini)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.signal.validate()?;
        self.codec.validate()?;
        self.discriminator.validate()?;
        self.loss.validate()?;
        self.train.validate(&self.signal)?;
        let nyquist = self.signal.sample_rate as f64 / 2.0;
        if self.mel.n_mels == 0 || self.mel.fmin < 0.0 || self.mel.upper(&self.signal) > nyquist || self.mel.fmin >= self.mel.upper(&self.signal) {
            return Err(Error::Config(format!("mel settings {:?} are invalid for {nyquist} Hz Nyquist", self.mel)));
        }
        if self.loss.adversarial() && self.crop_frames() * self.signal.frame_shift < self.discriminator.min_samples() {
            return Err(Error::Config(format!(
                "training crops of {} samples are shorter than the discriminators' minimum {}",
                self.crop_frames() * self.signal.frame_shift,
                self.discriminator.min_samples()
            )));
        }
        Ok(())
    }

    /// Spectral frames per training crop, rounded up to a multiple of the
    /// downsampling ratio.
    pub fn crop_frames(&self) -> usize {
        (self.train.crop_length / self.signal.frame_shift).div_ceil(self.codec.down_up_ratio) * self.codec.down_up_ratio
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_matches_defaults() {
        let cfg = RunConfig::preset("paper", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.signal, SignalConfig::default());
        assert_eq!(cfg.codec.num_quantizers, 3);
        assert_eq!(cfg.crop_frames(), 200);
        assert_eq!(crate::bitrate_kbps(&cfg.codec, &cfg.signal), 4.5);
    }

    #[test]
    fn mini_preset_is_valid() {
        let cfg = RunConfig::preset("mini", &[]).unwrap();
        assert!(cfg.codec.channel_size < 128);
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = RunConfig::preset("paper", &["codec.num_quantizers=4".into(), "train.seed = 7".into()]).unwrap();
        assert_eq!(cfg.codec.num_quantizers, 4);
        assert_eq!(cfg.train.seed, 7);
        let cfg = RunConfig::preset("paper", &["eval.utmos_command=run-mos --fast".into()]).unwrap();
        assert_eq!(cfg.eval.utmos_command, "run-mos --fast");
        assert!(RunConfig::preset("paper", &["codec.codebook_size=1000".into()]).is_err());
        assert!(RunConfig::preset("paper", &["codec.bogus=1".into()]).is_err());
        assert!(RunConfig::preset("paper", &["train.crop_length=7961".into()]).is_err());
        assert!(RunConfig::preset("paper", &["nonsense".into()]).is_err());
        assert!(RunConfig::preset("huge", &[]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::preset("mini", &[]).unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn lr_schedule() {
        let t = TrainConfig::default();
        for e in [0usize, 1, 10, 500] {
            assert!((t.lr_at_epoch(e) - 2e-4 * 0.999f64.powi(e as i32)).abs() < 1e-18);
        }
    }
}
