//! Joint and individual training stages and their iterative repetition.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::cache::LatentCache;
use super::checkpoint::{StageCheckpoint, StagePhase, StageTag};
use super::corpus::{gather_batch, BatchSampler, Corpus};
use super::optim::{AdamW, AdamWConfig};
use crate::config::RunConfig;
use crate::data::Manifest;
use crate::discriminators::Discriminators;
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_terms, discriminator_loss, quantization_loss, spectral_losses, spectral_losses_pair, LossReport,
    LossWeights, MelFilterbank, COMMITMENT_WEIGHT,
};
use crate::metrics::{evaluate_corpus, MetricReport};
use crate::model::{dequantize, quantize, CodebookEma, CodecModel, LatentSequence};
use crate::nn::ops::scalar;
use crate::nn::params::{derive_seed, hash_tensors, rng_for};

const DTYPE: DType = DType::F32;

/// Result of one stage: its checkpoint and the per-step loss log.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub checkpoint: StageCheckpoint,
    pub reports: Vec<LossReport>,
    /// `(step, encoder+quantizer hash)` samples taken during an individual stage.
    pub freeze_checks: Vec<(usize, String)>,
}

/// Seed of the decoder re-initialization for an individual stage with `tag`.
pub fn decoder_reinit_seed(train_seed: u64, tag: StageTag) -> u64 {
    derive_seed(train_seed, &format!("{tag}.decoder"))
}

/// Seed of the discriminator initialization for a stage with `tag`.
pub fn discriminator_seed(train_seed: u64, tag: StageTag) -> u64 {
    derive_seed(train_seed, &format!("{tag}.discriminators"))
}

/// Seed of the untrained codec model.
pub fn model_seed(train_seed: u64) -> u64 {
    derive_seed(train_seed, "model")
}

/// Hash over encoder parameters and codebooks, comparable to
/// [`StageCheckpoint::encoder_quantizer_hash`].
pub fn frozen_hash(model: &CodecModel) -> Result<String> {
    let t = StageCheckpoint::model_tensors(model)?;
    Ok(hash_tensors(
        t.iter()
            .filter(|(n, _)| n.starts_with("encoder.") || n.starts_with("quantizer.codebook.")),
    ))
}

fn weight_map(w: &LossWeights) -> BTreeMap<String, f64> {
    [
        ("amplitude", w.w_amp),
        ("phase", w.w_phase),
        ("mel", w.w_mel),
        ("complex", w.w_complex),
        ("quantization", w.w_quant),
        ("adversarial", w.w_adv),
        ("feature_matching", w.w_fm),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn optimizer_config(cfg: &RunConfig) -> AdamWConfig {
    AdamWConfig {
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: cfg.train.adam_eps,
        weight_decay: cfg.train.weight_decay,
        grad_clip: cfg.train.grad_clip,
    }
}

fn check_compatible(cfg: &RunConfig, ckpt: &StageCheckpoint) -> Result<()> {
    let c = ckpt.config();
    if c.signal != cfg.signal || c.codec != cfg.codec {
        return Err(Error::Incompatible(format!(
            "checkpoint ({}) was trained with different signal or codec settings",
            ckpt.stage()
        )));
    }
    Ok(())
}

fn mel_bank(cfg: &RunConfig) -> Result<MelFilterbank> {
    MelFilterbank::new(&cfg.signal, cfg.mel.n_mels, cfg.mel.fmin, cfg.mel.upper(&cfg.signal), DTYPE)
}

fn latent_tensor(l: &LatentSequence, batch: usize) -> Result<Tensor> {
    Ok(Tensor::from_slice(l.values(), (batch, l.frames() / batch, l.dim()), &Device::Cpu)?)
}

/// Generator input of one step.
enum GeneratorInput<'a> {
    /// Joint stage: encode, quantize with a straight-through estimator, update codebooks.
    Joint { ema: &'a mut CodebookEma, rng: &'a mut rand_chacha::ChaCha8Rng },
    /// Individual stage: cached quantized latents for the crops.
    Cached(Tensor),
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    tag: StageTag,
    model: CodecModel,
    disc: Discriminators,
    gen_opt: AdamW,
    disc_opt: AdamW,
    mel: MelFilterbank,
    weights: LossWeights,
}

impl Trainer<'_> {
    /// One discriminator update followed by one generator update.
    fn step(&mut self, step: usize, lr: f64, batch: &super::corpus::Batch, input: GeneratorInput) -> Result<LossReport> {
        let (latent, quant_term) = match input {
            GeneratorInput::Cached(z) => (z, None),
            GeneratorInput::Joint { ema, rng } => {
                let z = self
                    .model
                    .encoder()
                    .forward(&batch.log_amplitude, &batch.phase)?;
                let (b, t, d) = z.dims3()?;
                let host = LatentSequence::new(b * t, d, z.flatten_all()?.to_vec1()?)?;
                if !ema.initialized {
                    let first = quantize(&host, self.model.codebooks())?;
                    ema.initialize_from(self.model.codebooks_mut(), &first.stage_inputs, rng);
                }
                let q = quantize(&host, self.model.codebooks())?;
                let flat = z.reshape((b * t, d))?;
                let live = (&flat - flat.detach())?;
                let mut ins = Vec::with_capacity(q.stage_inputs.len());
                let mut outs = Vec::with_capacity(q.stage_inputs.len());
                for (si, so) in q.stage_inputs.iter().zip(&q.stage_outputs) {
                    ins.push((&live + Tensor::from_slice(si.values(), (b * t, d), &Device::Cpu)?)?);
                    outs.push(Tensor::from_slice(so.values(), (b * t, d), &Device::Cpu)?);
                }
                let commit = (quantization_loss(&ins, &outs)? * COMMITMENT_WEIGHT)?;
                let zq = (&live + Tensor::from_slice(q.quantized.values(), (b * t, d), &Device::Cpu)?)?
                    .reshape((b, t, d))?;
                ema.update(self.model.codebooks_mut(), &q.stage_inputs, &q.tokens, rng)?;
                (zq, Some(commit))
            }
        };
        let (pla, pph) = self.model.decoder().forward(&latent)?;
        let spec = spectral_losses(&pla, &pph, &batch.log_amplitude, &batch.phase, &self.mel)?;
        let w = &self.weights;
        let mut terms: Vec<(&str, f64, Tensor)> = vec![
            ("amplitude", w.w_amp, spec.amplitude),
            ("phase", w.w_phase, spec.phase),
            ("mel", w.w_mel, spec.mel),
            ("complex", w.w_complex, spec.complex),
        ];
        let zero = Tensor::zeros((), DTYPE, &Device::Cpu)?;
        terms.push(("quantization", w.w_quant, quant_term.unwrap_or_else(|| zero.clone())));
        let mut disc_value = None;
        if w.adversarial() {
            let fake = self.model.istft().forward(&pla, &pph)?;
            let real_out = self.disc.forward(&batch.wave)?;
            let fake_out = self.disc.forward(&fake.detach())?;
            let d_loss = discriminator_loss(&real_out.scores, &fake_out.scores)?;
            disc_value = Some(scalar(&d_loss)?);
            self.disc_opt.step(&d_loss.backward()?, lr)?;
            let mut real_out = self.disc.forward(&batch.wave)?;
            for f in real_out.features.iter_mut().flatten() {
                *f = f.detach();
            }
            let fake_out = self.disc.forward(&fake)?;
            let adv = adversarial_terms(&real_out, &fake_out)?;
            terms.push(("adversarial", w.w_adv, adv.generator));
            terms.push(("feature_matching", w.w_fm, adv.feature_matching));
        } else {
            terms.push(("adversarial", w.w_adv, zero.clone()));
            terms.push(("feature_matching", w.w_fm, zero));
        }
        let weighted: Vec<Tensor> = terms
            .iter()
            .filter(|(_, w, _)| *w != 0.0)
            .map(|(_, w, t)| t.affine(*w, 0.0))
            .collect::<std::result::Result<_, _>>()?;
        let total = crate::nn::ops::sum_tensors(&weighted)?;
        let values = terms
            .iter()
            .map(|(n, _, t)| Ok((n.to_string(), scalar(t)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let mut report = LossReport::new(&self.tag.to_string(), step, values, weight_map(w), lr)?;
        report.discriminator = disc_value;
        self.gen_opt.step(&total.backward()?, lr)?;
        Ok(report)
    }

    fn into_checkpoint(self, ema: &CodebookEma, steps: usize) -> Result<StageCheckpoint> {
        let mut tensors = StageCheckpoint::model_tensors(&self.model)?;
        tensors.extend(StageCheckpoint::ema_tensors(ema, self.model.config().latent_dim));
        tensors.extend(self.disc.params().export("mpd.")?);
        tensors.extend(self.disc.params().export("mrd.")?);
        tensors.extend(self.gen_opt.export_state("optim.generator.")?);
        tensors.extend(self.disc_opt.export_state("optim.discriminator.")?);
        let mut ck = StageCheckpoint::new(self.tag, self.cfg.clone(), tensors, steps);
        ck.meta.generator_optimizer_steps = self.gen_opt.steps();
        ck.meta.discriminator_optimizer_steps = self.disc_opt.steps();
        ck.meta.ema_initialized = ema.initialized;
        Ok(ck)
    }
}

fn steps_per_epoch(corpus: &Corpus, batch: usize) -> usize {
    corpus.len().div_ceil(batch)
}

/// Joint stage: encoder, quantizer, decoder and discriminators trained together.
/// With `start`, all modules continue from that checkpoint (fine-tuning);
/// otherwise they are initialized from `cfg.train.seed`.
pub fn train_joint(cfg: &RunConfig, corpus: &Corpus, start: Option<&StageCheckpoint>, tag: StageTag) -> Result<StageOutcome> {
    cfg.validate()?;
    if tag.phase() != Some(StagePhase::Joint) {
        return Err(Error::invalid(format!("train_joint cannot produce a {tag} checkpoint")));
    }
    if !(cfg.loss.w_quant > 0.0) {
        return Err(Error::Config("the joint stage needs a positive loss.w_quant".into()));
    }
    let seed = cfg.train.seed;
    let disc = Discriminators::new(cfg.discriminator.clone(), discriminator_seed(seed, tag), DTYPE)?;
    let (model, mut ema, parent) = match start {
        Some(ck) => {
            check_compatible(cfg, ck)?;
            let model = ck.codec_model(DTYPE)?;
            let ema = ck.ema(model.codebooks())?;
            let disc_state = ck.group("mpd.").into_iter().chain(ck.group("mrd.")).collect::<BTreeMap<_, _>>();
            if !disc_state.is_empty() {
                disc.params().load("mpd.", &disc_state)?;
                disc.params().load("mrd.", &disc_state)?;
            }
            (model, ema, Some(ck.fingerprint()?))
        }
        None => {
            let model = CodecModel::new(cfg.signal, cfg.codec, model_seed(seed), DTYPE)?;
            let ema = CodebookEma::new(model.codebooks(), cfg.train.ema_decay as f32, cfg.train.dead_code_threshold as f32);
            (model, ema, None)
        }
    };
    let ocfg = optimizer_config(cfg);
    let gen_opt = AdamW::new(
        model.params().with_prefix("encoder.").chain(model.params().with_prefix("decoder.")),
        ocfg,
    )?;
    let disc_opt = AdamW::new(disc.params().iter(), ocfg)?;
    let mut trainer = Trainer {
        cfg,
        tag,
        model,
        disc,
        gen_opt,
        disc_opt,
        mel: mel_bank(cfg)?,
        weights: cfg.loss.clone(),
    };
    let ratio = cfg.codec.down_up_ratio;
    let crop_frames = cfg.crop_frames();
    let mut sampler = BatchSampler::new(corpus.len(), crop_frames / ratio, rng_for(seed, &format!("{tag}.batches")));
    let mut ema_rng = rng_for(seed, &format!("{tag}.ema"));
    let spe = steps_per_epoch(corpus, cfg.train.batch_size);
    let mut reports = Vec::with_capacity(cfg.train.steps_per_stage);
    for step in 1..=cfg.train.steps_per_stage {
        let lr = cfg.train.lr_at_epoch((step - 1) / spe);
        let crops = sampler.next_batch(cfg.train.batch_size, corpus, ratio);
        let batch = gather_batch(corpus, &crops, crop_frames, ratio, cfg.signal.frame_shift)?;
        let r = trainer.step(
            step,
            lr,
            &batch,
            GeneratorInput::Joint {
                ema: &mut ema,
                rng: &mut ema_rng,
            },
        )?;
        log_progress(&r, cfg.train.steps_per_stage);
        reports.push(r);
    }
    let mut checkpoint = trainer.into_checkpoint(&ema, cfg.train.steps_per_stage)?;
    checkpoint.meta.parent = parent;
    Ok(StageOutcome {
        checkpoint,
        reports,
        freeze_checks: Vec::new(),
    })
}

fn log_progress(r: &LossReport, total: usize) {
    if r.step == 1 || r.step % 50 == 0 || r.step == total {
        log::info!(
            "{} step {}/{}: total {:.4} amp {:.4} mel {:.4} phase {:.4} lr {:.3e}",
            r.stage,
            r.step,
            total,
            r.total,
            r.term("amplitude"),
            r.term("mel"),
            r.term("phase"),
            r.lr
        );
    }
}

/// Individual stage: encoder and quantizer copied from `joint` and frozen, decoder and
/// discriminators re-initialized and trained on the cached latents without the
/// quantization term.
pub fn train_individual(
    cfg: &RunConfig,
    joint: &StageCheckpoint,
    cache: &LatentCache,
    corpus: &Corpus,
    tag: StageTag,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if tag.phase() != Some(StagePhase::Individual) {
        return Err(Error::invalid(format!("train_individual cannot produce a {tag} checkpoint")));
    }
    if joint.stage().phase() != Some(StagePhase::Joint) {
        return Err(Error::Incompatible(format!(
            "the individual stage starts from a joint checkpoint, got {}",
            joint.stage()
        )));
    }
    check_compatible(cfg, joint)?;
    cache.verify(joint)?;
    let seed = cfg.train.seed;
    let mut model = joint.codec_model(DTYPE)?;
    let joint_hash = joint.encoder_quantizer_hash();
    if frozen_hash(&model)? != joint_hash {
        return Err(Error::Corruption("encoder/quantizer hash changed while loading the joint checkpoint".into()));
    }
    model.reinitialize_decoder(decoder_reinit_seed(seed, tag))?;
    let decoder_init_hash = model.params().hash(&["decoder."])?;
    let ratio = cfg.codec.down_up_ratio;
    let latents = corpus
        .utterances()
        .iter()
        .map(|u| {
            let entry = cache
                .entry(&u.id)
                .ok_or_else(|| Error::Incompatible(format!("latent cache has no entry for {}", u.id)))?;
            let tokens = cache.tokens(entry, &model)?;
            if tokens.frames() != u.latent_frames(ratio) {
                return Err(Error::Incompatible(format!(
                    "cached latents for {} have {} frames, audio needs {}",
                    u.id,
                    tokens.frames(),
                    u.latent_frames(ratio)
                )));
            }
            dequantize(&tokens, model.codebooks())
        })
        .collect::<Result<Vec<_>>>()?;
    let ema = joint.ema(model.codebooks())?;
    let disc = Discriminators::new(cfg.discriminator.clone(), discriminator_seed(seed, tag), DTYPE)?;
    let ocfg = optimizer_config(cfg);
    let gen_opt = AdamW::new(model.params().with_prefix("decoder."), ocfg)?;
    let disc_opt = AdamW::new(disc.params().iter(), ocfg)?;
    let mut weights = cfg.loss.clone();
    weights.w_quant = 0.0;
    let mut trainer = Trainer {
        cfg,
        tag,
        model,
        disc,
        gen_opt,
        disc_opt,
        mel: mel_bank(cfg)?,
        weights,
    };
    let crop_frames = cfg.crop_frames();
    let latent_crop = crop_frames / ratio;
    let mut sampler = BatchSampler::new(corpus.len(), latent_crop, rng_for(seed, &format!("{tag}.batches")));
    let spe = steps_per_epoch(corpus, cfg.train.batch_size);
    let mut reports = Vec::with_capacity(cfg.train.steps_per_stage);
    let mut freeze_checks = vec![(0, joint_hash.clone())];
    for step in 1..=cfg.train.steps_per_stage {
        let lr = cfg.train.lr_at_epoch((step - 1) / spe);
        let crops = sampler.next_batch(cfg.train.batch_size, corpus, ratio);
        let batch = gather_batch(corpus, &crops, crop_frames, ratio, cfg.signal.frame_shift)?;
        let dim = cfg.codec.latent_dim;
        let mut z = Vec::with_capacity(crops.len() * latent_crop * dim);
        for c in &crops {
            let l = &latents[c.utterance];
            z.extend_from_slice(&l.values()[c.latent_start * dim..(c.latent_start + latent_crop) * dim]);
        }
        let z = latent_tensor(&LatentSequence::new(crops.len() * latent_crop, dim, z)?, crops.len())?;
        let r = trainer.step(step, lr, &batch, GeneratorInput::Cached(z))?;
        log_progress(&r, cfg.train.steps_per_stage);
        reports.push(r);
        if step % cfg.train.freeze_check_every == 0 || step == cfg.train.steps_per_stage {
            let h = frozen_hash(&trainer.model)?;
            if h != joint_hash {
                return Err(Error::Corruption(format!(
                    "encoder/quantizer parameters changed during the individual stage at step {step}"
                )));
            }
            freeze_checks.push((step, h));
        }
    }
    let mut checkpoint = trainer.into_checkpoint(&ema, cfg.train.steps_per_stage)?;
    let fp = joint.fingerprint()?;
    checkpoint.meta.parent = Some(fp.clone());
    checkpoint.meta.latent_cache_source = Some(cache.index().checkpoint.clone());
    checkpoint.meta.decoder_init_hash = Some(decoder_init_hash);
    Ok(StageOutcome {
        checkpoint,
        reports,
        freeze_checks,
    })
}

/// Mean spectral terms of full-utterance encode/quantize/decode over a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitLosses {
    pub amplitude: f64,
    pub phase: f64,
    pub mel: f64,
    pub complex: f64,
}

impl FitLosses {
    pub fn amplitude_plus_mel(&self) -> f64 {
        self.amplitude + self.mel
    }
}

pub fn fit_losses(model: &CodecModel, corpus: &Corpus, cfg: &RunConfig) -> Result<FitLosses> {
    let mel = MelFilterbank::new(&cfg.signal, cfg.mel.n_mels, cfg.mel.fmin, cfg.mel.upper(&cfg.signal), DType::F64)?;
    let mut sum = [0.0f64; 4];
    for u in corpus.utterances() {
        let q = model.quantize(&model.encode(&u.pair)?)?;
        let decoded = model.decode(&q.quantized)?;
        let t = spectral_losses_pair(&decoded, &u.pair, &mel)?;
        for (s, v) in sum.iter_mut().zip(t) {
            *s += v;
        }
    }
    let n = corpus.len().max(1) as f64;
    Ok(FitLosses {
        amplitude: sum[0] / n,
        phase: sum[1] / n,
        mel: sum[2] / n,
        complex: sum[3] / n,
    })
}

/// One repetition of the paradigm in [`train_iterative`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub joint_checkpoint: String,
    pub individual_checkpoint: String,
    pub fit: FitLosses,
    pub metrics: MetricReport,
}

#[derive(Debug)]
pub struct IterativeOutcome {
    /// Joint and individual checkpoint of every iteration, in order.
    pub checkpoints: Vec<StageCheckpoint>,
    pub reports: Vec<LossReport>,
    pub iterations: Vec<IterationReport>,
}

/// Repeats (joint fine-tune, export, individual) `iterations` times from `start`,
/// writing `iteration-k-*.apck` checkpoints and `iteration-k-cache/` into `workdir`.
pub fn train_iterative(
    cfg: &RunConfig,
    start: &StageCheckpoint,
    manifest: &Manifest,
    corpus: &Corpus,
    iterations: usize,
    workdir: &Path,
) -> Result<IterativeOutcome> {
    if iterations == 0 {
        return Err(Error::invalid("iterative training needs at least one iteration"));
    }
    std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
    let mut current = start.clone();
    let mut out = IterativeOutcome {
        checkpoints: Vec::new(),
        reports: Vec::new(),
        iterations: Vec::new(),
    };
    for k in 1..=iterations {
        let jtag = StageTag::Iteration(k, StagePhase::Joint);
        let joint = train_joint(cfg, corpus, Some(&current), jtag)?;
        joint.checkpoint.save(&workdir.join(format!("{jtag}.apck")))?;
        let cache = LatentCache::export(&joint.checkpoint, manifest, &workdir.join(format!("iteration-{k}-cache")))?;
        let itag = StageTag::Iteration(k, StagePhase::Individual);
        let ind = train_individual(cfg, &joint.checkpoint, &cache, corpus, itag)?;
        ind.checkpoint.save(&workdir.join(format!("{itag}.apck")))?;
        let model = ind.checkpoint.codec_model(DTYPE)?;
        let metrics = evaluate_corpus(&model, manifest, None)?;
        out.iterations.push(IterationReport {
            iteration: k,
            joint_checkpoint: joint.checkpoint.fingerprint()?,
            individual_checkpoint: ind.checkpoint.fingerprint()?,
            fit: fit_losses(&model, corpus, cfg)?,
            metrics: metrics.aggregate,
        });
        out.reports.extend(joint.reports);
        out.reports.extend(ind.reports);
        out.checkpoints.push(joint.checkpoint);
        current = ind.checkpoint.clone();
        out.checkpoints.push(ind.checkpoint);
    }
    Ok(out)
}
