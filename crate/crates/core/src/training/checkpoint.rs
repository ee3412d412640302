//! Versioned stage checkpoint container (`.apck`).
//!
//! Layout: magic `APCK`, u32 format version, u64 metadata length, JSON metadata,
//! then every tensor listed in the metadata as little-endian f32 values.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{CodebookEma, Codebooks, CodecModel};
use crate::nn::params::{hash_tensors, hex};
use crate::nn::TensorData;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"APCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Modules frozen during the individual stage.
pub const FROZEN_MODULES: [&str; 2] = ["encoder", "quantizer"];

/// Tensor-name prefixes that are only needed to continue training.
const TRAINING_ONLY: [&str; 4] = ["mpd.", "mrd.", "optim.", "quantizer.ema."];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StagePhase {
    Joint,
    Individual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageTag {
    /// Untrained initialization.
    Initial,
    Joint,
    Individual,
    /// Stage of the k-th repetition of the paradigm (k >= 1).
    Iteration(usize, StagePhase),
}

impl StageTag {
    pub fn phase(&self) -> Option<StagePhase> {
        match self {
            StageTag::Initial => None,
            StageTag::Joint => Some(StagePhase::Joint),
            StageTag::Individual => Some(StagePhase::Individual),
            StageTag::Iteration(_, p) => Some(*p),
        }
    }

    /// Modules listed as frozen in checkpoints carrying this tag.
    pub fn frozen_manifest(&self) -> Vec<String> {
        match self.phase() {
            Some(StagePhase::Individual) => FROZEN_MODULES.iter().map(|s| s.to_string()).collect(),
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageTag::Initial => write!(f, "initial"),
            StageTag::Joint => write!(f, "joint"),
            StageTag::Individual => write!(f, "individual"),
            StageTag::Iteration(k, StagePhase::Joint) => write!(f, "iteration-{k}-joint"),
            StageTag::Iteration(k, StagePhase::Individual) => write!(f, "iteration-{k}-individual"),
        }
    }
}

impl FromStr for StageTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "initial" => return Ok(StageTag::Initial),
            "joint" => return Ok(StageTag::Joint),
            "individual" => return Ok(StageTag::Individual),
            _ => {}
        }
        let bad = || Error::invalid(format!("unknown stage tag {s:?}"));
        let rest = s.strip_prefix("iteration-").ok_or_else(bad)?;
        let (k, phase) = rest.split_once('-').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        let phase = match phase {
            "joint" => StagePhase::Joint,
            "individual" => StagePhase::Individual,
            _ => return Err(bad()),
        };
        Ok(StageTag::Iteration(k, phase))
    }
}

impl Serialize for StageTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for StageTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub training_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: StageTag,
    pub frozen: Vec<String>,
    pub config: RunConfig,
    /// Optimizer steps taken in the stage that produced this checkpoint.
    pub stage_steps: usize,
    pub generator_optimizer_steps: usize,
    pub discriminator_optimizer_steps: usize,
    pub ema_initialized: bool,
    /// Fingerprint of the checkpoint this stage started from.
    pub parent: Option<String>,
    /// Checkpoint fingerprint the consumed latent cache was bound to.
    pub latent_cache_source: Option<String>,
    /// Hash of the decoder parameters at the first step of the stage.
    pub decoder_init_hash: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageCheckpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, TensorData>,
}

pub fn codebook_key(stage: usize) -> String {
    format!("quantizer.codebook.{stage}")
}

impl StageCheckpoint {
    /// Assembles a checkpoint; the tensor index is derived from `tensors`.
    pub fn new(
        stage: StageTag,
        config: RunConfig,
        tensors: BTreeMap<String, TensorData>,
        stage_steps: usize,
    ) -> Self {
        let index = tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                training_only: TRAINING_ONLY.iter().any(|p| name.starts_with(p)),
            })
            .collect();
        Self {
            meta: CheckpointMeta {
                stage,
                frozen: stage.frozen_manifest(),
                config,
                stage_steps,
                generator_optimizer_steps: 0,
                discriminator_optimizer_steps: 0,
                ema_initialized: false,
                parent: None,
                latent_cache_source: None,
                decoder_init_hash: None,
                tensors: index,
            },
            tensors,
        }
    }

    /// Tensors of a codec model: encoder, decoder, and codebooks.
    pub fn model_tensors(model: &CodecModel) -> Result<BTreeMap<String, TensorData>> {
        let mut out = model.params().export("encoder.")?;
        out.extend(model.params().export("decoder.")?);
        for (i, table) in model.codebooks().tables().iter().enumerate() {
            out.insert(
                codebook_key(i),
                TensorData {
                    shape: vec![model.config().codebook_size, model.config().latent_dim],
                    data: table.clone(),
                },
            );
        }
        Ok(out)
    }

    pub fn ema_tensors(ema: &CodebookEma, dim: usize) -> BTreeMap<String, TensorData> {
        let mut out = BTreeMap::new();
        for (i, (cs, es)) in ema.cluster_size.iter().zip(&ema.embed_sum).enumerate() {
            out.insert(
                format!("quantizer.ema.cluster_size.{i}"),
                TensorData {
                    shape: vec![cs.len()],
                    data: cs.clone(),
                },
            );
            out.insert(
                format!("quantizer.ema.embed_sum.{i}"),
                TensorData {
                    shape: vec![cs.len(), dim],
                    data: es.clone(),
                },
            );
        }
        out
    }

    pub fn stage(&self) -> StageTag {
        self.meta.stage
    }

    pub fn config(&self) -> &RunConfig {
        &self.meta.config
    }

    /// Tensors whose names start with `prefix`.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, TensorData> {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    pub fn group_hash(&self, prefixes: &[&str]) -> String {
        hash_tensors(
            self.tensors
                .iter()
                .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p))),
        )
    }

    /// Hash over encoder parameters and codebooks.
    pub fn encoder_quantizer_hash(&self) -> String {
        self.group_hash(&["encoder.", "quantizer.codebook."])
    }

    pub fn decoder_hash(&self) -> String {
        self.group_hash(&["decoder."])
    }

    pub fn codebooks(&self) -> Result<Codebooks> {
        let codec = &self.meta.config.codec;
        let tables = (0..codec.num_quantizers)
            .map(|i| {
                self.tensors
                    .get(&codebook_key(i))
                    .map(|t| t.data.clone())
                    .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks {}", codebook_key(i))))
            })
            .collect::<Result<Vec<_>>>()?;
        Codebooks::new(codec.codebook_size, codec.latent_dim, tables)
    }

    /// Codebook EMA state, or a fresh one when the checkpoint carries none.
    pub fn ema(&self, books: &Codebooks) -> Result<CodebookEma> {
        let t = &self.meta.config.train;
        let mut ema = CodebookEma::new(books, t.ema_decay as f32, t.dead_code_threshold as f32);
        if !self.meta.ema_initialized {
            return Ok(ema);
        }
        for i in 0..books.num_quantizers() {
            let cs = self.tensors.get(&format!("quantizer.ema.cluster_size.{i}"));
            let es = self.tensors.get(&format!("quantizer.ema.embed_sum.{i}"));
            match (cs, es) {
                (Some(cs), Some(es)) => {
                    ema.cluster_size[i] = cs.data.clone();
                    ema.embed_sum[i] = es.data.clone();
                }
                _ => return Err(Error::Incompatible(format!("checkpoint lacks EMA state for stage {i}"))),
            }
        }
        ema.initialized = true;
        Ok(ema)
    }

    /// Inference model with this checkpoint's parameters.
    pub fn codec_model(&self, dtype: DType) -> Result<CodecModel> {
        let cfg = &self.meta.config;
        let mut model = CodecModel::new(cfg.signal, cfg.codec, 0, dtype)?;
        model.params().load("encoder.", &self.tensors)?;
        model.params().load("decoder.", &self.tensors)?;
        model.set_codebooks(self.codebooks()?)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let floats: usize = self.meta.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        let mut out = Vec::with_capacity(16 + meta.len() + 4 * floats);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for entry in &self.meta.tensors {
            let t = self
                .tensors
                .get(&entry.name)
                .ok_or_else(|| Error::invalid(format!("tensor index names missing tensor {}", entry.name)))?;
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                expected: 16,
                actual: bytes.len(),
            });
        }
        if bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: bytes[0..4].try_into().expect("four bytes"),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
        let meta_end = 16usize
            .checked_add(meta_len)
            .filter(|e| *e <= bytes.len())
            .ok_or(Error::Truncated {
                expected: 16 + meta_len,
                actual: bytes.len(),
            })?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..meta_end])?;
        let floats: usize = meta.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        let expected = meta_end + 4 * floats;
        if bytes.len() != expected {
            if bytes.len() < expected {
                return Err(Error::Truncated {
                    expected,
                    actual: bytes.len(),
                });
            }
            return Err(Error::Corruption(format!(
                "checkpoint has {} trailing bytes",
                bytes.len() - expected
            )));
        }
        let mut tensors = BTreeMap::new();
        let mut pos = meta_end;
        for entry in &meta.tensors {
            let n: usize = entry.shape.iter().product();
            let data = bytes[pos..pos + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            pos += 4 * n;
            tensors.insert(
                entry.name.clone(),
                TensorData {
                    shape: entry.shape.clone(),
                    data,
                },
            );
        }
        meta.config.validate()?;
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::bitstream::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_bytes()?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip() {
        for tag in [
            StageTag::Initial,
            StageTag::Joint,
            StageTag::Individual,
            StageTag::Iteration(2, StagePhase::Joint),
            StageTag::Iteration(3, StagePhase::Individual),
        ] {
            assert_eq!(tag.to_string().parse::<StageTag>().unwrap(), tag);
        }
        assert!("iteration-0-joint".parse::<StageTag>().is_err());
        assert!("final".parse::<StageTag>().is_err());
        assert_eq!(StageTag::Individual.frozen_manifest(), vec!["encoder", "quantizer"]);
        assert!(StageTag::Joint.frozen_manifest().is_empty());
    }

    #[test]
    fn container_round_trip_and_errors() {
        let cfg = RunConfig::preset("mini", &[]).unwrap();
        let model = CodecModel::new(cfg.signal, cfg.codec, 3, DType::F32).unwrap();
        let mut tensors = StageCheckpoint::model_tensors(&model).unwrap();
        tensors.insert("mpd.0.post.bias".into(), TensorData { shape: vec![1], data: vec![0.5] });
        let ck = StageCheckpoint::new(StageTag::Joint, cfg, tensors, 0);
        assert!(ck.meta.tensors.iter().find(|e| e.name == "mpd.0.post.bias").unwrap().training_only);
        assert!(!ck.meta.tensors.iter().find(|e| e.name.starts_with("encoder.")).unwrap().training_only);
        let bytes = ck.to_bytes().unwrap();
        let back = StageCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.fingerprint().unwrap(), ck.fingerprint().unwrap());
        let restored = back.codec_model(DType::F32).unwrap();
        assert_eq!(
            restored.params().hash(&["encoder.", "decoder."]).unwrap(),
            model.params().hash(&["encoder.", "decoder."]).unwrap()
        );
        assert_eq!(restored.codebooks(), model.codebooks());
        assert!(matches!(StageCheckpoint::from_bytes(&bytes[..bytes.len() - 2]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(matches!(StageCheckpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
    }
}
