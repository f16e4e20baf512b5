#ifndef NESTEDFORMER_H
#define NESTEDFORMER_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum NfStatus {
  NF_STATUS_OK = 0,
  NF_STATUS_NULL_POINTER = 1,
  NF_STATUS_INVALID_ARGUMENT = 2,
  NF_STATUS_DIMENSION = 3,
  NF_STATUS_FORMAT = 4,
  NF_STATUS_UNSUPPORTED_VERSION = 5,
  NF_STATUS_IO = 6,
  NF_STATUS_NUMERIC = 7,
  NF_STATUS_INTERNAL = 8,
} NfStatus;

/**
 * Opaque model handle.
 */
typedef struct NfModel NfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length excluding the NUL,
 * or 0 if there is none.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t nf_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nf_version(void);

/**
 * Build the small test-scale model for `modalities` inputs of extents
 * `d×h×w` (each a multiple of 16) and `classes` output labels.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
enum NfStatus nf_model_build_toy(uint32_t modalities,
                                 uint32_t classes,
                                 uint32_t d,
                                 uint32_t h,
                                 uint32_t w,
                                 uint64_t seed,
                                 struct NfModel **out);

/**
 * Build a model from a JSON configuration (missing fields take defaults).
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` as for
 * [`nf_model_build_toy`].
 */
enum NfStatus nf_model_build_json(const char *config_json, struct NfModel **out);

/**
 * Load a checkpoint written by [`nf_model_save`] or the CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` as for [`nf_model_build_toy`].
 */
enum NfStatus nf_model_load(const char *path, struct NfModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum NfStatus nf_model_save(const struct NfModel *model, const char *path);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void nf_model_free(struct NfModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` writable.
 */
enum NfStatus nf_model_param_count(const struct NfModel *model, uint64_t *out);

/**
 * Write the model's input shape as `[modalities, d, h, w, classes]`.
 *
 * # Safety
 * `model` must be a live handle; `out` must hold 5 values.
 */
enum NfStatus nf_model_shape(const struct NfModel *model, uint32_t *out);

/**
 * Forward pass. `input` holds `modalities·d·h·w` floats, modality-major
 * then z, y, x. `logits` receives `d·h·w·classes` floats, class fastest.
 *
 * # Safety
 * `input` must be valid for `input_len` floats and `logits` for `logits_len`.
 */
enum NfStatus nf_model_forward(const struct NfModel *model,
                               const float *input,
                               size_t input_len,
                               float *logits,
                               size_t logits_len);

/**
 * Attention score entries per head and layer; `tsa` selects the
 * tri-oriented count, otherwise full attention.
 *
 * # Safety
 * `grid` and `window` must hold 3 values; `out` writable.
 */
enum NfStatus nf_attention_cost(const uint32_t *grid,
                                const uint32_t *window,
                                bool tsa,
                                uint64_t *out);

/**
 * Dice of label `class` between two `d·h·w` label volumes.
 *
 * # Safety
 * `pred` and `gt` must be valid for `extents[0]·extents[1]·extents[2]` bytes.
 */
enum NfStatus nf_dice(const uint8_t *pred,
                      const uint8_t *gt,
                      const uint32_t *extents,
                      uint8_t class_,
                      double *out);

/**
 * HD95 of label `class` with voxel `spacing` (z, y, x). When exactly one
 * volume lacks the label the result is `+INFINITY`.
 *
 * # Safety
 * As for [`nf_dice`]; `spacing` must hold 3 values.
 */
enum NfStatus nf_hd95(const uint8_t *pred,
                      const uint8_t *gt,
                      const uint32_t *extents,
                      uint8_t class_,
                      const double *spacing,
                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NESTEDFORMER_H */
