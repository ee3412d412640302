//! C ABI for the apcodec codec.
//!
//! Every fallible function returns an [`ApcStatus`]; on failure a message is kept
//! per thread and can be read with [`apc_last_error_message`]. Buffers handed out
//! by the library must be released with the matching `apc_*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use apcodec::bitstream::{self, BitstreamHeader};
use apcodec::frontend::{SignalConfig, Stft};
use apcodec::model::CodecConfig;
use apcodec::training::StageCheckpoint;
use apcodec::{CodecModel, Error};
use candle_core::DType;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApcStatus {
    Ok = 0,
    /// Null pointer or otherwise unusable argument.
    InvalidArgument = 1,
    InvalidInput = 2,
    Io = 3,
    BadMagic = 4,
    UnsupportedVersion = 5,
    Truncated = 6,
    Corruption = 7,
    Incompatible = 8,
    StaleCache = 9,
    Config = 10,
    Internal = 11,
    Panic = 12,
}

impl From<&Error> for ApcStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidInput(_) => ApcStatus::InvalidInput,
            Error::Corruption(_) => ApcStatus::Corruption,
            Error::BadMagic { .. } => ApcStatus::BadMagic,
            Error::UnsupportedVersion { .. } => ApcStatus::UnsupportedVersion,
            Error::Truncated { .. } => ApcStatus::Truncated,
            Error::Incompatible(_) => ApcStatus::Incompatible,
            Error::StaleCache { .. } => ApcStatus::StaleCache,
            Error::Config(_) => ApcStatus::Config,
            Error::Io { .. } | Error::Wav(_) => ApcStatus::Io,
            Error::Json(_) | Error::Tensor(_) => ApcStatus::Internal,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

enum Failure {
    Arg(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ApcStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ApcStatus::Ok,
        Ok(Err(Failure::Arg(msg))) => {
            set_error(msg.to_string());
            ApcStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            ApcStatus::from(&e)
        }
        Err(_) => {
            set_error("internal panic".to_string());
            ApcStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Arg(what));
    }
    // SAFETY: the caller promises `p` points to `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn hand_out<T>(v: Vec<T>, out: *mut *mut T, out_len: *mut usize) {
    let boxed = v.into_boxed_slice();
    let len = boxed.len();
    let p = Box::into_raw(boxed) as *mut T;
    // SAFETY: both output pointers were checked non-null by the caller.
    unsafe {
        *out = p;
        *out_len = len;
    }
}

unsafe fn release<T>(p: *mut T, len: usize) {
    if !p.is_null() {
        // SAFETY: `p`/`len` came from `hand_out`.
        drop(unsafe { Box::from_raw(ptr::slice_from_raw_parts_mut(p, len)) });
    }
}

/// Loaded inference model.
pub struct ApcCodec {
    model: CodecModel,
    stft: Stft,
}

/// Decoded bitstream header.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct ApcBitstreamInfo {
    pub sample_rate: u32,
    pub frame_shift: u16,
    pub down_up_ratio: u8,
    pub num_quantizers: u8,
    pub codebook_bits: u8,
    pub latent_frames: u32,
    pub original_samples: u32,
    pub payload_bytes: usize,
    pub bitrate_kbps: f64,
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn apc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Opens a `.apck` checkpoint for inference.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn apc_codec_open(path: *const c_char, out: *mut *mut ApcCodec) -> ApcStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(Failure::Arg("null path or output pointer"));
        }
        // SAFETY: checked non-null; caller guarantees NUL termination.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| Failure::Arg("path is not valid UTF-8"))?;
        let ck = StageCheckpoint::load(Path::new(path))?;
        let model = ck.codec_model(DType::F32)?;
        let stft = Stft::new(*model.signal())?;
        // SAFETY: checked non-null.
        unsafe { *out = Box::into_raw(Box::new(ApcCodec { model, stft })) };
        Ok(())
    })
}

/// # Safety
/// `codec` must come from [`apc_codec_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn apc_codec_free(codec: *mut ApcCodec) {
    if !codec.is_null() {
        // SAFETY: pointer came from Box::into_raw.
        drop(unsafe { Box::from_raw(codec) });
    }
}

/// Sample rate the codec expects, or 0 for a null handle.
///
/// # Safety
/// `codec` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn apc_codec_sample_rate(codec: *const ApcCodec) -> u32 {
    // SAFETY: null or live handle.
    unsafe { codec.as_ref() }.map_or(0, |c| c.model.signal().sample_rate)
}

/// Bitrate of the codec's token stream in kbps, or 0 for a null handle.
///
/// # Safety
/// `codec` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn apc_codec_bitrate_kbps(codec: *const ApcCodec) -> f64 {
    // SAFETY: null or live handle.
    unsafe { codec.as_ref() }.map_or(0.0, |c| c.model.bitrate_kbps())
}

/// Mono samples to a `.apc` bitstream. Free the result with [`apc_bytes_free`].
///
/// # Safety
/// `samples` must point to `len` floats; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn apc_codec_encode(
    codec: *const ApcCodec,
    samples: *const f32,
    len: usize,
    out_bytes: *mut *mut u8,
    out_len: *mut usize,
) -> ApcStatus {
    guard(|| {
        // SAFETY: null or live handle.
        let c = unsafe { codec.as_ref() }.ok_or(Failure::Arg("null codec"))?;
        if out_bytes.is_null() || out_len.is_null() {
            return Err(Failure::Arg("null output pointer"));
        }
        // SAFETY: forwarded caller contract.
        let wave = unsafe { slice(samples, len, "null samples") }?;
        let enc = c.model.encode_waveform(&c.stft, wave)?;
        let header = BitstreamHeader::new(c.model.signal(), c.model.config(), enc.tokens.frames(), enc.original_samples)?;
        hand_out(bitstream::pack(&enc.tokens, &header)?, out_bytes, out_len);
        Ok(())
    })
}

/// `.apc` bitstream to mono samples. Free the result with [`apc_samples_free`].
///
/// # Safety
/// `bytes` must point to `len` bytes; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn apc_codec_decode(
    codec: *const ApcCodec,
    bytes: *const u8,
    len: usize,
    out_samples: *mut *mut f32,
    out_len: *mut usize,
) -> ApcStatus {
    guard(|| {
        // SAFETY: null or live handle.
        let c = unsafe { codec.as_ref() }.ok_or(Failure::Arg("null codec"))?;
        if out_samples.is_null() || out_len.is_null() {
            return Err(Failure::Arg("null output pointer"));
        }
        // SAFETY: forwarded caller contract.
        let bytes = unsafe { slice(bytes, len, "null bitstream") }?;
        let (tokens, header) = bitstream::unpack(bytes)?;
        header.check_compatible(c.model.signal(), c.model.config())?;
        tokens.check_bounds(c.model.config().codebook_size)?;
        let wave = c.model.decode_tokens(&c.stft, &tokens, header.original_samples as usize)?;
        hand_out(wave, out_samples, out_len);
        Ok(())
    })
}

/// # Safety
/// `p`/`len` must come from [`apc_codec_encode`].
#[no_mangle]
pub unsafe extern "C" fn apc_bytes_free(p: *mut u8, len: usize) {
    // SAFETY: forwarded caller contract.
    unsafe { release(p, len) }
}

/// # Safety
/// `p`/`len` must come from [`apc_codec_decode`].
#[no_mangle]
pub unsafe extern "C" fn apc_samples_free(p: *mut f32, len: usize) {
    // SAFETY: forwarded caller contract.
    unsafe { release(p, len) }
}

/// Parses and validates a bitstream (header and payload size).
///
/// # Safety
/// `bytes` must point to `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn apc_bitstream_info(bytes: *const u8, len: usize, out: *mut ApcBitstreamInfo) -> ApcStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Arg("null output pointer"));
        }
        // SAFETY: forwarded caller contract.
        let bytes = unsafe { slice(bytes, len, "null bitstream") }?;
        let (_, h) = bitstream::unpack(bytes)?;
        let info = ApcBitstreamInfo {
            sample_rate: h.sample_rate,
            frame_shift: h.frame_shift,
            down_up_ratio: h.down_up_ratio,
            num_quantizers: h.num_quantizers,
            codebook_bits: h.codebook_bits,
            latent_frames: h.latent_frames,
            original_samples: h.original_samples,
            payload_bytes: h.payload_bytes(),
            bitrate_kbps: h.bitrate_kbps(),
        };
        // SAFETY: checked non-null.
        unsafe { *out = info };
        Ok(())
    })
}

/// Bitrate in kbps of a token stream with these settings.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn apc_bitrate_kbps(
    sample_rate: u32,
    frame_shift: usize,
    down_up_ratio: usize,
    num_quantizers: usize,
    codebook_size: usize,
    out: *mut f64,
) -> ApcStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Arg("null output pointer"));
        }
        let sig = SignalConfig {
            sample_rate,
            frame_shift,
            ..SignalConfig::default()
        };
        let codec = CodecConfig {
            down_up_ratio,
            num_quantizers,
            codebook_size,
            ..CodecConfig::default()
        };
        if sample_rate == 0 || frame_shift == 0 {
            return Err(Failure::Lib(Error::Config("sample rate and frame shift must be positive".into())));
        }
        codec.validate()?;
        // SAFETY: checked non-null.
        unsafe { *out = apcodec::bitrate_kbps(&codec, &sig) };
        Ok(())
    })
}

fn signal(sample_rate: u32, frame_length: usize, frame_shift: usize, fft_size: usize) -> Result<SignalConfig, Failure> {
    let sig = SignalConfig {
        sample_rate,
        frame_length,
        frame_shift,
        fft_size,
    };
    sig.validate()?;
    Ok(sig)
}

/// Log-spectral distance in dB between a reference and a test signal.
///
/// # Safety
/// Sample pointers must point to their lengths in floats; `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn apc_lsd(
    reference: *const f32,
    reference_len: usize,
    test: *const f32,
    test_len: usize,
    sample_rate: u32,
    frame_length: usize,
    frame_shift: usize,
    fft_size: usize,
    out: *mut f64,
) -> ApcStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Arg("null output pointer"));
        }
        // SAFETY: forwarded caller contract.
        let (r, t) = unsafe { (slice(reference, reference_len, "null reference")?, slice(test, test_len, "null test")?) };
        let v = apcodec::metrics::lsd(r, t, &signal(sample_rate, frame_length, frame_shift, fft_size)?)?;
        // SAFETY: checked non-null.
        unsafe { *out = v };
        Ok(())
    })
}

/// Anti-wrapping phase distances (instantaneous phase in rad, group delay in s,
/// instantaneous angular frequency in rad/s).
///
/// # Safety
/// Sample pointers must point to their lengths in floats; outputs must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn apc_awpd(
    reference: *const f32,
    reference_len: usize,
    test: *const f32,
    test_len: usize,
    sample_rate: u32,
    frame_length: usize,
    frame_shift: usize,
    fft_size: usize,
    out_ip: *mut f64,
    out_gd: *mut f64,
    out_iaf: *mut f64,
) -> ApcStatus {
    guard(|| {
        if out_ip.is_null() || out_gd.is_null() || out_iaf.is_null() {
            return Err(Failure::Arg("null output pointer"));
        }
        // SAFETY: forwarded caller contract.
        let (r, t) = unsafe { (slice(reference, reference_len, "null reference")?, slice(test, test_len, "null test")?) };
        let d = apcodec::metrics::awpd(r, t, &signal(sample_rate, frame_length, frame_shift, fft_size)?)?;
        // SAFETY: checked non-null.
        unsafe {
            *out_ip = d.ip;
            *out_gd = d.gd;
            *out_iaf = d.iaf;
        }
        Ok(())
    })
}

/// Distance of `x` to the nearest multiple of 2*pi.
#[no_mangle]
pub extern "C" fn apc_anti_wrap(x: f64) -> f64 {
    apcodec::losses::anti_wrap(x)
}
