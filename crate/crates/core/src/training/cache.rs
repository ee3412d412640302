//! Write-once cache of quantized training latents: one `.apc` bitstream per
//! utterance plus `index.json` naming the checkpoint that produced them.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{StageCheckpoint, StagePhase};
use crate::bitstream::{self, BitstreamHeader};
use crate::data::{read_wav, Manifest};
use crate::error::{Error, Result};
use crate::frontend::Stft;
use crate::model::{CodecModel, TokenSequence};

pub const INDEX_FILE: &str = "index.json";
const CACHE_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub id: String,
    pub file: String,
    pub original_samples: usize,
    pub latent_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub format: u32,
    /// Fingerprint of the producing checkpoint.
    pub checkpoint: String,
    pub stage: String,
    pub entries: Vec<CacheEntry>,
}

#[derive(Debug, Clone)]
pub struct LatentCache {
    dir: PathBuf,
    index: CacheIndex,
}

fn file_name_for(i: usize) -> String {
    format!("{i:06}.apc")
}

impl LatentCache {
    /// Tokens for every manifest entry under `ckpt`'s frozen encoder and quantizer.
    /// Refuses to write into a directory that already holds a cache.
    pub fn export(ckpt: &StageCheckpoint, manifest: &Manifest, dir: &Path) -> Result<Self> {
        if ckpt.stage().phase() != Some(StagePhase::Joint) {
            return Err(Error::Incompatible(format!(
                "latents are exported from joint-stage checkpoints, got a {} checkpoint",
                ckpt.stage()
            )));
        }
        if manifest.is_empty() {
            return Err(Error::invalid("manifest is empty"));
        }
        let index_path = dir.join(INDEX_FILE);
        if index_path.exists() {
            return Err(Error::invalid(format!(
                "{} already holds a latent cache; caches are write-once",
                dir.display()
            )));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let model = ckpt.codec_model(candle_core::DType::F32)?;
        let cfg = ckpt.config();
        let stft = Stft::new(cfg.signal)?;
        let entries = manifest
            .entries
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                let wave = read_wav(&e.path, cfg.signal.sample_rate)?;
                let enc = model.encode_waveform(&stft, &wave)?;
                let header = BitstreamHeader::new(&cfg.signal, &cfg.codec, enc.tokens.frames(), wave.len())?;
                let file = file_name_for(i);
                bitstream::write_atomic(&dir.join(&file), &bitstream::pack(&enc.tokens, &header)?)?;
                Ok(CacheEntry {
                    id: e.id.clone(),
                    file,
                    original_samples: wave.len(),
                    latent_frames: enc.tokens.frames(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let index = CacheIndex {
            format: CACHE_FORMAT,
            checkpoint: ckpt.fingerprint()?,
            stage: ckpt.stage().to_string(),
            entries,
        };
        bitstream::write_atomic(&index_path, &serde_json::to_vec_pretty(&index)?)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
        })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let index: CacheIndex = serde_json::from_slice(&text)?;
        if index.format != CACHE_FORMAT {
            return Err(Error::UnsupportedVersion {
                found: index.format,
                supported: CACHE_FORMAT,
            });
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn index(&self) -> &CacheIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.index.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.entries.is_empty()
    }

    /// Fails with [`Error::StaleCache`] unless the cache was produced by `ckpt`.
    pub fn verify(&self, ckpt: &StageCheckpoint) -> Result<()> {
        let fp = ckpt.fingerprint()?;
        if fp != self.index.checkpoint {
            return Err(Error::StaleCache {
                cached: self.index.checkpoint.clone(),
                checkpoint: fp,
            });
        }
        Ok(())
    }

    pub fn entry(&self, id: &str) -> Option<&CacheEntry> {
        self.index.entries.iter().find(|e| e.id == id)
    }

    /// Reads and checks one entry against `model`'s configuration.
    pub fn tokens(&self, entry: &CacheEntry, model: &CodecModel) -> Result<TokenSequence> {
        let (tokens, header) = bitstream::read_file(&self.dir.join(&entry.file))?;
        header.check_compatible(model.signal(), model.config())?;
        if tokens.frames() != entry.latent_frames || header.original_samples as usize != entry.original_samples {
            return Err(Error::Corruption(format!("cache entry {} disagrees with the index", entry.id)));
        }
        tokens.check_bounds(model.config().codebook_size)?;
        Ok(tokens)
    }
}
