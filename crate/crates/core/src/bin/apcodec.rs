use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apcodec::bitstream::{self, BitstreamHeader};
use apcodec::data::{read_wav, write_toy_corpus, write_wav, Manifest};
use apcodec::frontend::Stft;
use apcodec::losses::LossReport;
use apcodec::metrics::{evaluate_corpus, run_utmos_hook};
use apcodec::training::checkpoint::CHECKPOINT_MAGIC;
use apcodec::training::{
    train_individual, train_iterative, train_joint, Corpus, LatentCache, StageCheckpoint, StageTag,
};
use apcodec::{Error, Result, RunConfig};
use candle_core::DType;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "apcodec", version, about = "Amplitude/phase neural audio codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: `paper` or `mini`.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Override one key, e.g. `--set codec.num_quantizers=4` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every stochastic component (same as `--set train.seed=N`).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("train.seed={s}"));
        }
        o
    }

    /// Explicit config or preset; otherwise `fallback` (a checkpoint's snapshot) or the paper preset.
    fn resolve(&self, fallback: Option<&RunConfig>) -> Result<RunConfig> {
        let o = self.overrides();
        match (&self.config, &self.preset, fallback) {
            (Some(path), _, _) => RunConfig::load(path, &o),
            (None, Some(name), _) => RunConfig::preset(name, &o),
            (None, None, Some(cfg)) => RunConfig::from_toml_str(&cfg.to_toml_string()?, &o),
            (None, None, None) => RunConfig::preset("paper", &o),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Joint stage: train encoder, quantizer, decoder and discriminators together.
    TrainJoint {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training manifest (defaults to `paths.manifest`).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines loss log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Quantize the training set with a joint checkpoint's frozen encoder and quantizer.
    ExportLatents {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Cache directory (must not already hold a cache).
        #[arg(long)]
        out: PathBuf,
    },
    /// Individual stage: re-initialized decoder and discriminators on cached latents.
    TrainIndividual {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Joint-stage checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Repeat (joint fine-tune, export, individual) several times.
    TrainIterative {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Starting checkpoint (usually an individual-stage one).
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        iterations: usize,
        /// Directory for per-iteration checkpoints, caches and reports.
        #[arg(long)]
        workdir: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Waveform to `.apc` bitstream.
    Encode {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// `.apc` bitstream to waveform.
    Decode {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Objective metrics over a manifest.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// JSON-lines report.
        #[arg(long)]
        out: PathBuf,
        /// Also write decoded audio here.
        #[arg(long)]
        decoded_dir: Option<PathBuf>,
    },
    /// Describe a bitstream or checkpoint.
    Info { path: PathBuf },
    /// Summarize a JSON-lines loss log.
    Report { log: PathBuf },
    /// Write a synthetic speech-like corpus and its manifest.
    MakeToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 16_000)]
        sample_rate: u32,
        #[arg(long, default_value_t = 0.5)]
        min_seconds: f64,
        #[arg(long, default_value_t = 1.0)]
        max_seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn manifest_path(arg: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    arg.clone()
        .or_else(|| cfg.paths.manifest.clone())
        .ok_or_else(|| Error::Config("no manifest given (use --manifest or paths.manifest)".into()))
}

fn write_log(path: &Option<PathBuf>, reports: &[LossReport]) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Model config for inference: the checkpoint's own, optionally checked against an explicit one.
fn inference_checkpoint(cfg: &ConfigArgs, path: &Path) -> Result<StageCheckpoint> {
    let ck = StageCheckpoint::load(path)?;
    if cfg.config.is_some() || cfg.preset.is_some() || !cfg.overrides.is_empty() {
        let want = cfg.resolve(Some(ck.config()))?;
        if want.signal != ck.config().signal || want.codec != ck.config().codec {
            return Err(Error::Incompatible(format!(
                "{} was trained with different signal or codec settings than the given config",
                path.display()
            )));
        }
    }
    Ok(ck)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainJoint {
            cfg,
            manifest,
            from,
            out,
            log,
        } => {
            let start = from.as_deref().map(StageCheckpoint::load).transpose()?;
            let cfg = cfg.resolve(start.as_ref().map(|c| c.config()))?;
            let manifest = Manifest::load(&manifest_path(&manifest, &cfg)?)?;
            let corpus = Corpus::load(&manifest, &cfg)?;
            let outcome = train_joint(&cfg, &corpus, start.as_ref(), StageTag::Joint)?;
            outcome.checkpoint.save(&out)?;
            write_log(&log, &outcome.reports)?;
            println!("{} checkpoint {} ({} steps)", outcome.checkpoint.stage(), out.display(), outcome.reports.len());
        }
        Command::ExportLatents { ckpt, manifest, out } => {
            let ck = StageCheckpoint::load(&ckpt)?;
            let manifest = Manifest::load(&manifest_path(&manifest, ck.config())?)?;
            let cache = LatentCache::export(&ck, &manifest, &out)?;
            println!("{} entries in {} (checkpoint {})", cache.len(), out.display(), cache.index().checkpoint);
        }
        Command::TrainIndividual {
            cfg,
            ckpt,
            cache,
            manifest,
            out,
            log,
        } => {
            let joint = StageCheckpoint::load(&ckpt)?;
            let cfg = cfg.resolve(Some(joint.config()))?;
            let cache = LatentCache::open(&cache)?;
            let manifest = Manifest::load(&manifest_path(&manifest, &cfg)?)?;
            let corpus = Corpus::load(&manifest, &cfg)?;
            let outcome = train_individual(&cfg, &joint, &cache, &corpus, StageTag::Individual)?;
            outcome.checkpoint.save(&out)?;
            write_log(&log, &outcome.reports)?;
            println!("{} checkpoint {} ({} steps)", outcome.checkpoint.stage(), out.display(), outcome.reports.len());
        }
        Command::TrainIterative {
            cfg,
            ckpt,
            manifest,
            iterations,
            workdir,
            log,
        } => {
            let start = StageCheckpoint::load(&ckpt)?;
            let cfg = cfg.resolve(Some(start.config()))?;
            let manifest = Manifest::load(&manifest_path(&manifest, &cfg)?)?;
            let corpus = Corpus::load(&manifest, &cfg)?;
            let outcome = train_iterative(&cfg, &start, &manifest, &corpus, iterations, &workdir)?;
            write_log(&log, &outcome.reports)?;
            let mut rows = String::new();
            for it in &outcome.iterations {
                rows.push_str(&serde_json::to_string(it)?);
                rows.push('\n');
                println!(
                    "iteration {}: LSD {:.4} dB, IP {:.4}, GD {:.4}, IAF {:.4}, amp+mel {:.4}",
                    it.iteration,
                    it.metrics.lsd,
                    it.metrics.awpd_ip,
                    it.metrics.awpd_gd_rad,
                    it.metrics.awpd_iaf_rad,
                    it.fit.amplitude_plus_mel()
                );
            }
            let path = workdir.join("iterations.jsonl");
            std::fs::write(&path, rows).map_err(|e| Error::io(&path, e))?;
        }
        Command::Encode {
            cfg,
            ckpt,
            input,
            output,
        } => {
            let ck = inference_checkpoint(&cfg, &ckpt)?;
            let model = ck.codec_model(DType::F32)?;
            let sig = *model.signal();
            let wave = read_wav(&input, sig.sample_rate)?;
            let enc = model.encode_waveform(&Stft::new(sig)?, &wave)?;
            let header = BitstreamHeader::new(&sig, model.config(), enc.tokens.frames(), enc.original_samples)?;
            bitstream::write_atomic(&output, &bitstream::pack(&enc.tokens, &header)?)?;
        }
        Command::Decode {
            cfg,
            ckpt,
            input,
            output,
        } => {
            let ck = inference_checkpoint(&cfg, &ckpt)?;
            let model = ck.codec_model(DType::F32)?;
            let (tokens, header) = bitstream::read_file(&input)?;
            header.check_compatible(model.signal(), model.config())?;
            tokens.check_bounds(model.config().codebook_size)?;
            let sig = *model.signal();
            let wave = model.decode_tokens(&Stft::new(sig)?, &tokens, header.original_samples as usize)?;
            write_wav(&output, &wave, sig.sample_rate)?;
        }
        Command::Evaluate {
            cfg,
            ckpt,
            manifest,
            out,
            decoded_dir,
        } => {
            let ck = inference_checkpoint(&cfg, &ckpt)?;
            let run_cfg = cfg.resolve(Some(ck.config()))?;
            let manifest = Manifest::load(&manifest_path(&manifest, &run_cfg)?)?;
            let model = ck.codec_model(DType::F32)?;
            let hook = run_cfg.eval.utmos_command.trim().to_string();
            let scratch;
            let decoded = match (&decoded_dir, hook.is_empty()) {
                (Some(d), _) => {
                    std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                    Some(d.clone())
                }
                (None, false) => {
                    scratch = tempfile::tempdir().map_err(|e| Error::io(Path::new("tempdir"), e))?;
                    Some(scratch.path().to_path_buf())
                }
                (None, true) => None,
            };
            let mut report = evaluate_corpus(&model, &manifest, decoded.as_deref())?;
            if let (false, Some(d)) = (hook.is_empty(), &decoded) {
                report.utmos = Some(run_utmos_hook(&hook, d)?);
            }
            bitstream::write_atomic(&out, report.to_jsonl()?.as_bytes())?;
            print!("{}", report.table());
        }
        Command::Info { path } => {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let mut stdout = std::io::stdout().lock();
            if bytes.starts_with(&CHECKPOINT_MAGIC) {
                let ck = StageCheckpoint::from_bytes(&bytes)?;
                let m = &ck.meta;
                let cfg = ck.config();
                writeln!(stdout, "kind: checkpoint").ok();
                writeln!(stdout, "stage: {}", m.stage).ok();
                writeln!(stdout, "frozen: [{}]", m.frozen.join(", ")).ok();
                writeln!(stdout, "stage_steps: {}", m.stage_steps).ok();
                writeln!(stdout, "fingerprint: {}", ck.fingerprint()?).ok();
                writeln!(stdout, "parent: {}", m.parent.as_deref().unwrap_or("-")).ok();
                writeln!(stdout, "encoder_quantizer_hash: {}", ck.encoder_quantizer_hash()).ok();
                writeln!(stdout, "decoder_hash: {}", ck.decoder_hash()).ok();
                writeln!(stdout, "tensors: {}", m.tensors.len()).ok();
                writeln!(stdout, "bitrate_kbps: {}", apcodec::bitrate_kbps(&cfg.codec, &cfg.signal)).ok();
            } else {
                let (_, h) = bitstream::unpack(&bytes)?;
                writeln!(stdout, "kind: bitstream").ok();
                writeln!(stdout, "version: {}", bitstream::VERSION).ok();
                writeln!(stdout, "sample_rate: {}", h.sample_rate).ok();
                writeln!(stdout, "frame_shift: {}", h.frame_shift).ok();
                writeln!(stdout, "down_up_ratio: {}", h.down_up_ratio).ok();
                writeln!(stdout, "num_quantizers: {}", h.num_quantizers).ok();
                writeln!(stdout, "codebook_bits: {}", h.codebook_bits).ok();
                writeln!(stdout, "latent_frames: {}", h.latent_frames).ok();
                writeln!(stdout, "original_samples: {}", h.original_samples).ok();
                writeln!(stdout, "duration_seconds: {}", h.duration_seconds()).ok();
                writeln!(stdout, "payload_bytes: {}", h.payload_bytes()).ok();
                writeln!(stdout, "bitrate_kbps: {}", h.bitrate_kbps()).ok();
            }
        }
        Command::Report { log } => {
            let text = std::fs::read_to_string(&log).map_err(|e| Error::io(&log, e))?;
            let mut stages: Vec<(String, LossReport, LossReport)> = Vec::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let r: LossReport = serde_json::from_str(line)?;
                match stages.last_mut() {
                    Some((s, _, last)) if *s == r.stage => *last = r,
                    _ => stages.push((r.stage.clone(), r.clone(), r)),
                }
            }
            if stages.is_empty() {
                return Err(Error::invalid(format!("{} holds no loss records", log.display())));
            }
            println!("{:<24} {:>6} {:>12} {:>12} {:>12} {:>12}", "stage", "steps", "total@1", "total@end", "amp+mel@1", "amp+mel@end");
            for (stage, first, last) in &stages {
                println!(
                    "{:<24} {:>6} {:>12.4} {:>12.4} {:>12.4} {:>12.4}",
                    stage,
                    last.step,
                    first.total,
                    last.total,
                    first.term("amplitude") + first.term("mel"),
                    last.term("amplitude") + last.term("mel")
                );
            }
        }
        Command::MakeToyCorpus {
            out,
            count,
            sample_rate,
            min_seconds,
            max_seconds,
            seed,
        } => {
            let path = write_toy_corpus(&out, count, sample_rate, min_seconds, max_seconds, seed)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
