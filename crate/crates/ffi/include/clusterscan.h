/* C interface for the clusterscan image-restoration library.
 * Generated from the Rust source; do not edit by hand. */

#ifndef CLUSTERSCAN_H
#define CLUSTERSCAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum CsmStatus {
  /**
   * The call succeeded.
   */
  CsmStatus_Ok = 0,
  /**
   * A required pointer argument was NULL.
   */
  CsmStatus_NullPointer = 1,
  /**
   * Arguments or configuration were rejected (shapes, extents, presets).
   */
  CsmStatus_InvalidArgument = 2,
  /**
   * File I/O failed or serialized data was malformed.
   */
  CsmStatus_IoError = 3,
  /**
   * An internal computation failed.
   */
  CsmStatus_RuntimeError = 4,
} CsmStatus;

/**
 * Built-in model configurations.
 */
typedef enum CsmPreset {
  /**
   * The full restoration network (about 2.77M parameters).
   */
  CsmPreset_Standard = 0,
  /**
   * The small test network; fast enough for smoke checks.
   */
  CsmPreset_Small = 1,
} CsmPreset;

/**
 * Opaque model handle. Layout is private to the library.
 */
typedef struct CsmModel CsmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *csm_version(void);

/**
 * Description of the calling thread's most recent failure; empty until one
 * occurs. The pointer stays valid until the next failing call on the thread.
 */
const char *csm_last_error(void);

/**
 * Create a freshly initialized model (an exact identity map until trained).
 */
enum CsmStatus csm_model_new(enum CsmPreset preset, uint64_t seed, struct CsmModel **out);

/**
 * Load a model from a checkpoint file written by `csm_model_save` (or the
 * command-line trainer).
 */
enum CsmStatus csm_model_load(const char *path, struct CsmModel **out);

/**
 * Write the model to a checkpoint file. Values are stored in 32-bit
 * precision; save -> load -> save is byte-identical.
 */
enum CsmStatus csm_model_save(const struct CsmModel *model, const char *path);

/**
 * Release a model handle. NULL is accepted and ignored.
 */
void csm_model_free(struct CsmModel *model);

/**
 * Number of learnable parameter values in the model.
 */
enum CsmStatus csm_model_param_count(const struct CsmModel *model, uint64_t *out);

/**
 * Both image extents passed to `csm_model_restore` must be multiples of
 * this divisor (callers pad beforehand and crop afterwards).
 */
enum CsmStatus csm_model_spatial_divisor(const struct CsmModel *model, uint64_t *out);

/**
 * Restore one image. `rgb` and `out` are planar `[3, height, width]`
 * buffers of `3 * height * width` doubles in `[0, 1]`; they may not alias.
 * Deterministic: the same model and input always produce the same output.
 */
enum CsmStatus csm_model_restore(const struct CsmModel *model,
                                 const double *rgb,
                                 uint64_t height,
                                 uint64_t width,
                                 double *out);

/**
 * Peak signal-to-noise ratio in dB between two equal-length buffers of
 * values in `[0, 1]`. Identical buffers yield +infinity.
 */
enum CsmStatus csm_psnr(const double *a, const double *b, uint64_t len, double *out);

/**
 * Mean structural similarity between two planar `[channels, height, width]`
 * buffers, computed per channel over an 11x11 Gaussian window.
 */
enum CsmStatus csm_ssim(const double *a,
                        const double *b,
                        uint64_t channels,
                        uint64_t height,
                        uint64_t width,
                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLUSTERSCAN_H */
