//! Builds a C program against the generated header and shared library.

use std::path::{Path, PathBuf};
use std::process::Command;

use apcodec::training::{StageCheckpoint, StageTag};
use apcodec::{CodecModel, RunConfig};
use candle_core::DType;

/// `target/<profile>`, the directory holding the built `libapcodec_ffi`.
fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_round_trip() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib_dir = profile_dir();
    assert!(
        lib_dir.join("libapcodec_ffi.so").exists(),
        "shared library missing from {}",
        lib_dir.display()
    );
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg("-L")
        .arg(&lib_dir)
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .args(["-lapcodec_ffi", "-lm", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .status()
        .expect("a C compiler named cc");
    assert!(status.success(), "C compilation failed");

    let cfg = RunConfig::preset("mini", &[]).unwrap();
    let model = CodecModel::new(cfg.signal, cfg.codec, 2, DType::F32).unwrap();
    let ckpt = dir.path().join("mini.apck");
    StageCheckpoint::new(StageTag::Joint, cfg, StageCheckpoint::model_tensors(&model).unwrap(), 0)
        .save(&ckpt)
        .unwrap();
    let out = Command::new(&exe).arg(&ckpt).output().unwrap();
    assert!(
        out.status.success(),
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
