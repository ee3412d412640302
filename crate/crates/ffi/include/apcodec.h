#ifndef APCODEC_H
#define APCODEC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ApcStatus {
  APC_STATUS_OK = 0,
  /**
   * Null pointer or otherwise unusable argument.
   */
  APC_STATUS_INVALID_ARGUMENT = 1,
  APC_STATUS_INVALID_INPUT = 2,
  APC_STATUS_IO = 3,
  APC_STATUS_BAD_MAGIC = 4,
  APC_STATUS_UNSUPPORTED_VERSION = 5,
  APC_STATUS_TRUNCATED = 6,
  APC_STATUS_CORRUPTION = 7,
  APC_STATUS_INCOMPATIBLE = 8,
  APC_STATUS_STALE_CACHE = 9,
  APC_STATUS_CONFIG = 10,
  APC_STATUS_INTERNAL = 11,
  APC_STATUS_PANIC = 12,
} ApcStatus;

/**
 * Loaded inference model.
 */
typedef struct ApcCodec ApcCodec;

/**
 * Decoded bitstream header.
 */
typedef struct ApcBitstreamInfo {
  uint32_t sample_rate;
  uint16_t frame_shift;
  uint8_t down_up_ratio;
  uint8_t num_quantizers;
  uint8_t codebook_bits;
  uint32_t latent_frames;
  uint32_t original_samples;
  size_t payload_bytes;
  double bitrate_kbps;
} ApcBitstreamInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *apc_last_error_message(void);

/**
 * Opens a `.apck` checkpoint for inference.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum ApcStatus apc_codec_open(const char *path, struct ApcCodec **out);

/**
 * # Safety
 * `codec` must come from [`apc_codec_open`] and not be used afterwards.
 */
void apc_codec_free(struct ApcCodec *codec);

/**
 * Sample rate the codec expects, or 0 for a null handle.
 *
 * # Safety
 * `codec` must be null or a live handle.
 */
uint32_t apc_codec_sample_rate(const struct ApcCodec *codec);

/**
 * Bitrate of the codec's token stream in kbps, or 0 for a null handle.
 *
 * # Safety
 * `codec` must be null or a live handle.
 */
double apc_codec_bitrate_kbps(const struct ApcCodec *codec);

/**
 * Mono samples to a `.apc` bitstream. Free the result with [`apc_bytes_free`].
 *
 * # Safety
 * `samples` must point to `len` floats; output pointers must be writable.
 */
enum ApcStatus apc_codec_encode(const struct ApcCodec *codec,
                                const float *samples,
                                size_t len,
                                uint8_t **out_bytes,
                                size_t *out_len);

/**
 * `.apc` bitstream to mono samples. Free the result with [`apc_samples_free`].
 *
 * # Safety
 * `bytes` must point to `len` bytes; output pointers must be writable.
 */
enum ApcStatus apc_codec_decode(const struct ApcCodec *codec,
                                const uint8_t *bytes,
                                size_t len,
                                float **out_samples,
                                size_t *out_len);

/**
 * # Safety
 * `p`/`len` must come from [`apc_codec_encode`].
 */
void apc_bytes_free(uint8_t *p, size_t len);

/**
 * # Safety
 * `p`/`len` must come from [`apc_codec_decode`].
 */
void apc_samples_free(float *p, size_t len);

/**
 * Parses and validates a bitstream (header and payload size).
 *
 * # Safety
 * `bytes` must point to `len` bytes; `out` must be writable.
 */
enum ApcStatus apc_bitstream_info(const uint8_t *bytes, size_t len, struct ApcBitstreamInfo *out);

/**
 * Bitrate in kbps of a token stream with these settings.
 *
 * # Safety
 * `out` must be writable.
 */
enum ApcStatus apc_bitrate_kbps(uint32_t sample_rate,
                                size_t frame_shift,
                                size_t down_up_ratio,
                                size_t num_quantizers,
                                size_t codebook_size,
                                double *out);

/**
 * Log-spectral distance in dB between a reference and a test signal.
 *
 * # Safety
 * Sample pointers must point to their lengths in floats; `out` must be writable.
 */
enum ApcStatus apc_lsd(const float *reference,
                       size_t reference_len,
                       const float *test,
                       size_t test_len,
                       uint32_t sample_rate,
                       size_t frame_length,
                       size_t frame_shift,
                       size_t fft_size,
                       double *out);

/**
 * Anti-wrapping phase distances (instantaneous phase in rad, group delay in s,
 * instantaneous angular frequency in rad/s).
 *
 * # Safety
 * Sample pointers must point to their lengths in floats; outputs must be writable.
 */
enum ApcStatus apc_awpd(const float *reference,
                        size_t reference_len,
                        const float *test,
                        size_t test_len,
                        uint32_t sample_rate,
                        size_t frame_length,
                        size_t frame_shift,
                        size_t fft_size,
                        double *out_ip,
                        double *out_gd,
                        double *out_iaf);

/**
 * Distance of `x` to the nearest multiple of 2*pi.
 */
double apc_anti_wrap(double x);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* APCODEC_H */
