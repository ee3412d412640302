use std::path::Path;
use std::process::{Command, Output};

use apcodec::bitstream::{self, BitstreamHeader};
use apcodec::model::TokenSequence;
use apcodec::{CodecConfig, SignalConfig};

fn apcodec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apcodec"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = apcodec(args);
    assert!(
        out.status.success(),
        "apcodec {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_export_encode_decode_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let toy = d.join("toy");
    let manifest = ok(&["make-toy-corpus", "--out", s(&toy), "--count", "3"]);
    let manifest = manifest.trim();
    let (joint, cache, ind) = (d.join("j.apck"), d.join("cache"), d.join("i.apck"));
    let steps = "train.steps_per_stage=3";
    ok(&[
        "train-joint", "--preset", "mini", "--set", steps, "--manifest", manifest, "--out", s(&joint), "--log",
        s(&d.join("j.jsonl")),
    ]);
    let listed = ok(&["export-latents", "--ckpt", s(&joint), "--manifest", manifest, "--out", s(&cache)]);
    assert!(listed.starts_with("3 entries"), "{listed}");
    let again = apcodec(&["export-latents", "--ckpt", s(&joint), "--manifest", manifest, "--out", s(&cache)]);
    assert!(!again.status.success(), "caches are write-once");
    ok(&[
        "train-individual", "--set", steps, "--ckpt", s(&joint), "--cache", s(&cache), "--manifest", manifest,
        "--out", s(&ind), "--log", s(&d.join("i.jsonl")),
    ]);

    let info = ok(&["info", s(&ind)]);
    assert!(info.contains("stage: individual"), "{info}");
    assert!(info.contains("frozen: [encoder, quantizer]"), "{info}");
    assert!(info.contains("bitrate_kbps: 3"), "{info}");
    let report = ok(&["report", s(&d.join("i.jsonl"))]);
    assert!(report.lines().nth(1).unwrap().starts_with("individual"), "{report}");

    let wav = toy.join("clip000.wav");
    assert!(wav.exists());
    let (apc, decoded) = (d.join("a.apc"), d.join("a.wav"));
    ok(&["encode", "--ckpt", s(&ind), s(&wav), s(&apc)]);
    ok(&["decode", "--ckpt", s(&ind), s(&apc), s(&decoded)]);
    let original = apcodec::data::read_wav(&wav, 16_000).unwrap();
    let back = apcodec::data::read_wav(&decoded, 16_000).unwrap();
    assert_eq!(original.len(), back.len());
    let bits = ok(&["info", s(&apc)]);
    assert!(bits.contains("kind: bitstream") && bits.contains("num_quantizers: 2"), "{bits}");

    let eval = d.join("eval.jsonl");
    let table = ok(&["evaluate", "--ckpt", s(&ind), "--manifest", manifest, "--out", s(&eval)]);
    assert!(table.contains("LSD") || table.contains("lsd"), "{table}");
    assert_eq!(std::fs::read_to_string(&eval).unwrap().lines().count(), 4);

    // A config that disagrees with the checkpoint is refused.
    let wrong = apcodec(&["decode", "--ckpt", s(&ind), "--set", "codec.num_quantizers=3", s(&apc), s(&decoded)]);
    assert!(!wrong.status.success());
}

#[test]
fn info_reports_paper_bitrate() {
    let dir = tempfile::tempdir().unwrap();
    let sig = SignalConfig::default();
    let codec = CodecConfig::default();
    let tokens = TokenSequence::new(150, 3, vec![5; 450]).unwrap();
    let header = BitstreamHeader::new(&sig, &codec, 150, 48_000).unwrap();
    let path = dir.path().join("one-second.apc");
    std::fs::write(&path, bitstream::pack(&tokens, &header).unwrap()).unwrap();
    let info = ok(&["info", s(&path)]);
    assert!(info.contains("bitrate_kbps: 4.5\n"), "{info}");
    assert!(info.contains("payload_bytes: 563\n"), "{info}");
}

#[test]
fn evaluate_on_empty_manifest_fails_without_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = d.join("empty.jsonl");
    std::fs::write(&manifest, "").unwrap();
    let toy = ok(&["make-toy-corpus", "--out", s(&d.join("toy")), "--count", "1"]);
    let joint = d.join("j.apck");
    ok(&[
        "train-joint", "--preset", "mini", "--set", "train.steps_per_stage=1", "--manifest", toy.trim(), "--out",
        s(&joint),
    ]);
    let report = d.join("report.jsonl");
    let out = apcodec(&["evaluate", "--ckpt", s(&joint), "--manifest", s(&manifest), "--out", s(&report)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert!(!report.exists());
}

#[test]
fn bad_invocations_exit_nonzero() {
    assert!(!apcodec(&["no-such-command"]).status.success());
    assert!(!apcodec(&[]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.apc");
    std::fs::write(&junk, b"not a bitstream at all").unwrap();
    let out = apcodec(&["info", s(&junk)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    let out = apcodec(&["train-joint", "--preset", "no-such-preset", "--manifest", s(&junk), "--out", s(&junk)]);
    assert!(!out.status.success());
}
