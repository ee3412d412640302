use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use apcodec::bitstream::{self, BitstreamHeader};
use apcodec::data::speech_like;
use apcodec::model::TokenSequence;
use apcodec::training::{StageCheckpoint, StageTag};
use apcodec::{CodecConfig, CodecModel, RunConfig, SignalConfig};
use apcodec_ffi::*;
use candle_core::DType;

fn write_checkpoint(dir: &Path) -> CString {
    let cfg = RunConfig::preset("mini", &[]).unwrap();
    let model = CodecModel::new(cfg.signal, cfg.codec, 5, DType::F32).unwrap();
    let tensors = StageCheckpoint::model_tensors(&model).unwrap();
    let path = dir.join("mini.apck");
    StageCheckpoint::new(StageTag::Joint, cfg, tensors, 0).save(&path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn open(path: &CString) -> *mut ApcCodec {
    let mut codec = ptr::null_mut();
    // SAFETY: valid C string and output pointer.
    assert_eq!(unsafe { apc_codec_open(path.as_ptr(), &mut codec) }, ApcStatus::Ok);
    assert!(!codec.is_null());
    codec
}

fn last_error() -> Option<String> {
    let p = apc_last_error_message();
    // SAFETY: null or a live per-thread C string.
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

fn encode(codec: *const ApcCodec, wave: &[f32]) -> Vec<u8> {
    let (mut p, mut n) = (ptr::null_mut(), 0usize);
    // SAFETY: live handle, valid buffers.
    let status = unsafe { apc_codec_encode(codec, wave.as_ptr(), wave.len(), &mut p, &mut n) };
    assert_eq!(status, ApcStatus::Ok, "{:?}", last_error());
    // SAFETY: `p` points to `n` bytes handed out by the library.
    let bytes = unsafe { std::slice::from_raw_parts(p, n) }.to_vec();
    // SAFETY: returned by apc_codec_encode.
    unsafe { apc_bytes_free(p, n) };
    bytes
}

fn decode(codec: *const ApcCodec, bytes: &[u8]) -> Result<Vec<f32>, ApcStatus> {
    let (mut p, mut n) = (ptr::null_mut(), 0usize);
    // SAFETY: live handle, valid buffers.
    let status = unsafe { apc_codec_decode(codec, bytes.as_ptr(), bytes.len(), &mut p, &mut n) };
    if status != ApcStatus::Ok {
        return Err(status);
    }
    // SAFETY: `p` points to `n` floats handed out by the library.
    let wave = unsafe { std::slice::from_raw_parts(p, n) }.to_vec();
    // SAFETY: returned by apc_codec_decode.
    unsafe { apc_samples_free(p, n) };
    Ok(wave)
}

#[test]
fn encode_decode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let codec = open(&write_checkpoint(dir.path()));
    // SAFETY: live handle.
    let (sr, kbps) = unsafe { (apc_codec_sample_rate(codec), apc_codec_bitrate_kbps(codec)) };
    assert_eq!(sr, 16_000);
    assert_eq!(kbps, 16_000.0 / 16.0 / 4.0 * 6.0 * 2.0 / 1000.0);

    let wave = speech_like(12_345, 16_000, 3);
    let bytes = encode(codec, &wave);
    let mut info = ApcBitstreamInfo::default();
    // SAFETY: valid buffers.
    assert_eq!(unsafe { apc_bitstream_info(bytes.as_ptr(), bytes.len(), &mut info) }, ApcStatus::Ok);
    assert_eq!(info.sample_rate, 16_000);
    assert_eq!(info.num_quantizers, 2);
    assert_eq!(info.codebook_bits, 6);
    assert_eq!(info.original_samples, 12_345);
    assert_eq!(info.bitrate_kbps, kbps);
    assert_eq!(bytes.len(), bitstream::HEADER_LEN + info.payload_bytes);

    let out = decode(codec, &bytes).unwrap();
    assert_eq!(out.len(), wave.len());
    assert!(out.iter().all(|v| v.is_finite()));
    assert_eq!(encode(codec, &wave), bytes, "encoding is deterministic");
    // SAFETY: handle from apc_codec_open, freed once.
    unsafe { apc_codec_free(codec) };
}

#[test]
fn failures_report_status_and_message() {
    let missing = CString::new("/nonexistent/model.apck").unwrap();
    let mut codec = ptr::null_mut();
    // SAFETY: valid C string and output pointer.
    assert_eq!(unsafe { apc_codec_open(missing.as_ptr(), &mut codec) }, ApcStatus::Io);
    assert!(codec.is_null());
    assert!(last_error().unwrap().contains("nonexistent"));
    // SAFETY: null arguments are reported, not dereferenced.
    assert_eq!(unsafe { apc_codec_open(ptr::null(), &mut codec) }, ApcStatus::InvalidArgument);

    let dir = tempfile::tempdir().unwrap();
    let codec = open(&write_checkpoint(dir.path()));
    assert_eq!(last_error(), None, "success clears the message");

    assert_eq!(decode(codec, b"RIFF0000000000000000000000"), Err(ApcStatus::BadMagic));
    let bytes = encode(codec, &speech_like(4_000, 16_000, 1));
    assert_eq!(decode(codec, &bytes[..bytes.len() - 1]), Err(ApcStatus::Truncated));
    assert_eq!(decode(codec, &bytes[..10]), Err(ApcStatus::Truncated));
    let mut future = bytes.clone();
    future[4] = 99;
    assert_eq!(decode(codec, &future), Err(ApcStatus::UnsupportedVersion));

    // A stream for a different codec configuration.
    let sig = SignalConfig::default();
    let codec_cfg = CodecConfig::default();
    let tokens = TokenSequence::new(5, 3, vec![7; 15]).unwrap();
    let header = BitstreamHeader::new(&sig, &codec_cfg, 5, 5 * 320).unwrap();
    let foreign = bitstream::pack(&tokens, &header).unwrap();
    assert_eq!(decode(codec, &foreign), Err(ApcStatus::Incompatible));
    assert!(last_error().is_some());

    let (mut p, mut n) = (ptr::null_mut(), 0usize);
    // SAFETY: null and empty inputs are reported, not dereferenced.
    unsafe {
        assert_eq!(apc_codec_encode(ptr::null(), ptr::null(), 0, &mut p, &mut n), ApcStatus::InvalidArgument);
        assert_eq!(apc_codec_encode(codec, ptr::null(), 0, &mut p, &mut n), ApcStatus::InvalidInput);
        assert_eq!(apc_codec_encode(codec, ptr::null(), 10, &mut p, &mut n), ApcStatus::InvalidArgument);
        apc_codec_free(codec);
        apc_codec_free(ptr::null_mut());
    }
}

#[test]
fn bitrate_and_metrics() {
    let mut kbps = 0.0;
    // SAFETY: valid output pointers throughout.
    unsafe {
        for (q, want) in [(3, 4.5), (4, 6.0), (8, 12.0)] {
            assert_eq!(apc_bitrate_kbps(48_000, 40, 8, q, 1024, &mut kbps), ApcStatus::Ok);
            assert_eq!(kbps, want);
        }
        assert_eq!(apc_bitrate_kbps(48_000, 40, 8, 3, 1000, &mut kbps), ApcStatus::Config);
        assert_eq!(apc_bitrate_kbps(48_000, 0, 8, 3, 1024, &mut kbps), ApcStatus::Config);
    }

    let x = speech_like(8_000, 16_000, 9);
    let doubled: Vec<f32> = x.iter().map(|v| v * 2.0).collect();
    let (mut l, mut ip, mut gd, mut iaf) = (f64::NAN, f64::NAN, f64::NAN, f64::NAN);
    // SAFETY: valid buffers and output pointers.
    unsafe {
        assert_eq!(apc_lsd(x.as_ptr(), x.len(), x.as_ptr(), x.len(), 16_000, 64, 16, 128, &mut l), ApcStatus::Ok);
        assert_eq!(l, 0.0);
        let s = apc_lsd(doubled.as_ptr(), x.len(), x.as_ptr(), x.len(), 16_000, 64, 16, 128, &mut l);
        assert_eq!(s, ApcStatus::Ok);
        assert!((l - 20.0 * 2f64.log10()).abs() < 1e-3);
        let s = apc_awpd(x.as_ptr(), x.len(), x.as_ptr(), x.len(), 16_000, 64, 16, 128, &mut ip, &mut gd, &mut iaf);
        assert_eq!(s, ApcStatus::Ok);
        assert_eq!((ip, gd, iaf), (0.0, 0.0, 0.0));
        let s = apc_lsd(x.as_ptr(), x.len(), x.as_ptr(), x.len(), 16_000, 64, 24, 128, &mut l);
        assert_eq!(s, ApcStatus::Config, "frame shift must divide frame length");
    }

    let pi = std::f64::consts::PI;
    assert_eq!(apc_anti_wrap(0.0), 0.0);
    assert!((apc_anti_wrap(2.0 * pi + 0.5) - 0.5).abs() < 1e-12);
    assert_eq!(apc_anti_wrap(-1.25), apc_anti_wrap(1.25));
    assert!(apc_anti_wrap(3.0 * pi) <= pi);
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/apcodec.h")).unwrap();
    for name in [
        "typedef struct ApcCodec ApcCodec;",
        "APC_STATUS_STALE_CACHE = 9",
        "apc_codec_open",
        "apc_codec_free",
        "apc_codec_encode",
        "apc_codec_decode",
        "apc_bytes_free",
        "apc_samples_free",
        "apc_bitstream_info",
        "apc_bitrate_kbps",
        "apc_lsd",
        "apc_awpd",
        "apc_anti_wrap",
        "apc_last_error_message",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
