//! In-memory training corpus and random crop batches.

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{read_wav, Manifest};
use crate::error::{Error, Result};
use crate::frontend::{SpectralPair, Stft};

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub original_samples: usize,
    /// Waveform zero-padded to `pair.frames() * frame_shift` samples.
    pub wave: Vec<f32>,
    /// Analysis spectra padded to a multiple of the downsampling ratio.
    pub pair: SpectralPair,
}

impl Utterance {
    pub fn latent_frames(&self, ratio: usize) -> usize {
        self.pair.frames() / ratio
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    utterances: Vec<Utterance>,
    skipped: Vec<String>,
}

impl Corpus {
    /// Reads and analyzes every manifest entry. Clips shorter than the training crop
    /// are skipped with a warning; it is an error if nothing remains.
    pub fn load(manifest: &Manifest, cfg: &RunConfig) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::invalid("training manifest is empty"));
        }
        let waves = manifest
            .entries
            .par_iter()
            .map(|e| Ok((e.id.clone(), read_wav(&e.path, cfg.signal.sample_rate)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_waves(waves, cfg)
    }

    pub fn from_waves(waves: Vec<(String, Vec<f32>)>, cfg: &RunConfig) -> Result<Self> {
        let stft = Stft::new(cfg.signal)?;
        let crop = cfg.train.crop_length;
        let mut skipped = Vec::new();
        let mut kept = Vec::new();
        for (id, wave) in waves {
            if wave.len() < crop {
                log::warn!("skipping {id}: {} samples is shorter than the {crop}-sample crop", wave.len());
                skipped.push(id);
            } else {
                kept.push((id, wave));
            }
        }
        if kept.is_empty() {
            return Err(Error::invalid(format!(
                "every clip is shorter than the {crop}-sample training crop ({} skipped)",
                skipped.len()
            )));
        }
        let ratio = cfg.codec.down_up_ratio;
        let hop = cfg.signal.frame_shift;
        let utterances = kept
            .into_par_iter()
            .map(|(id, mut wave)| {
                let pair = stft.analyze(&wave)?.pad_frames_to_multiple(ratio)?;
                let original_samples = wave.len();
                wave.resize(pair.frames() * hop, 0.0);
                Ok(Utterance {
                    id,
                    original_samples,
                    wave,
                    pair,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { utterances, skipped })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn skipped(&self) -> &[String] {
        &self.skipped
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// One crop: utterance index and start position in latent frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub utterance: usize,
    pub latent_start: usize,
}

/// Draws batches by walking shuffled passes over the corpus; crop positions are
/// redrawn every time an utterance is visited.
#[derive(Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    latent_crop: usize,
}

impl BatchSampler {
    pub fn new(num_utterances: usize, latent_crop: usize, mut rng: ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..num_utterances).collect();
        order.shuffle(&mut rng);
        Self {
            rng,
            order,
            pos: 0,
            epoch: 0,
            latent_crop,
        }
    }

    /// Completed passes over the corpus.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self, batch_size: usize, corpus: &Corpus, ratio: usize) -> Vec<Crop> {
        (0..batch_size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.epoch += 1;
                    self.pos = 0;
                    self.order.shuffle(&mut self.rng);
                }
                let u = self.order[self.pos];
                self.pos += 1;
                let max_start = corpus.utterances[u].latent_frames(ratio) - self.latent_crop;
                Crop {
                    utterance: u,
                    latent_start: self.rng.random_range(0..=max_start),
                }
            })
            .collect()
    }
}

/// Batched crop tensors: spectra `[B, frames, bins]` and waveforms `[B, frames * hop]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub log_amplitude: Tensor,
    pub phase: Tensor,
    pub wave: Tensor,
}

pub fn gather_batch(corpus: &Corpus, crops: &[Crop], crop_frames: usize, ratio: usize, hop: usize) -> Result<Batch> {
    let bins = corpus
        .utterances
        .first()
        .map(|u| u.pair.bins())
        .ok_or_else(|| Error::invalid("empty corpus"))?;
    let mut la = Vec::with_capacity(crops.len() * crop_frames * bins);
    let mut ph = Vec::with_capacity(la.capacity());
    let mut wave = Vec::with_capacity(crops.len() * crop_frames * hop);
    for c in crops {
        let u = &corpus.utterances[c.utterance];
        let f0 = c.latent_start * ratio;
        la.extend_from_slice(&u.pair.log_amplitude()[f0 * bins..(f0 + crop_frames) * bins]);
        ph.extend_from_slice(&u.pair.phase()[f0 * bins..(f0 + crop_frames) * bins]);
        wave.extend_from_slice(&u.wave[f0 * hop..(f0 + crop_frames) * hop]);
    }
    let dev = Device::Cpu;
    let b = crops.len();
    Ok(Batch {
        log_amplitude: Tensor::from_vec(la, (b, crop_frames, bins), &dev)?,
        phase: Tensor::from_vec(ph, (b, crop_frames, bins), &dev)?,
        wave: Tensor::from_vec(wave, (b, crop_frames * hop), &dev)?,
    })
}
