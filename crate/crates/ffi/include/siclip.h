#ifndef SICLIP_H
#define SICLIP_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. `SICLIP_STATUS_OK` is zero; everything else is an error.
 */
typedef enum SiclipStatus {
  SICLIP_STATUS_OK = 0,
  SICLIP_STATUS_NULL_POINTER = 1,
  SICLIP_STATUS_INVALID_ARGUMENT = 2,
  SICLIP_STATUS_IO = 3,
  SICLIP_STATUS_FORMAT = 4,
  SICLIP_STATUS_SHAPE = 5,
  SICLIP_STATUS_NON_FINITE = 6,
  SICLIP_STATUS_VOCAB = 7,
  SICLIP_STATUS_INTERNAL = 8,
} SiclipStatus;

/**
 * A loaded two-tower model.
 */
typedef struct SiclipModel SiclipModel;

/**
 * Shape facts needed to size buffers.
 */
typedef struct SiclipModelInfo {
  size_t embed_dim;
  size_t image_size;
  size_t max_len;
  size_t vocab_size;
  size_t image_blocks;
  size_t text_blocks;
  size_t trainable_params;
  size_t total_params;
} SiclipModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread; empty after a
 * success. The pointer stays valid until the next call on this thread.
 */
const char *siclip_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *siclip_version(void);

/**
 * Loads an f32 checkpoint. On success `*out` receives a handle to free
 * with [`siclip_model_free`]; on failure it is set to null.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SiclipStatus siclip_model_load(const char *path, struct SiclipModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`siclip_model_load`] and not be used afterwards.
 */
void siclip_model_free(struct SiclipModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SiclipStatus siclip_model_info(const struct SiclipModel *model, struct SiclipModelInfo *out);

/**
 * Encodes `batch` images given as planar `B×3×S×S` floats in `[0, 1]` into
 * unit-norm rows written to `out` (`batch × embed_dim` floats).
 *
 * # Safety
 * `pixels` must hold `batch·3·S·S` floats and `out` `out_len` floats.
 */
enum SiclipStatus siclip_encode_images(const struct SiclipModel *model,
                                       const float *pixels,
                                       size_t batch,
                                       float *out,
                                       size_t out_len);

/**
 * Encodes `batch` token rows of length `len` (id 0 pads) into unit-norm
 * rows written to `out` (`batch × embed_dim` floats).
 *
 * # Safety
 * `ids` must hold `batch·len` values and `out` `out_len` floats.
 */
enum SiclipStatus siclip_encode_tokens(const struct SiclipModel *model,
                                       const uint32_t *ids,
                                       size_t batch,
                                       size_t len,
                                       float *out,
                                       size_t out_len);

/**
 * Row-averaged Jensen–Shannon divergence (nats) between two row-stochastic
 * `rows × cols` matrices.
 *
 * # Safety
 * `p` and `q` must hold `rows·cols` doubles; `out` must be writable.
 */
enum SiclipStatus siclip_js_divergence(const double *p,
                                       const double *q,
                                       size_t rows,
                                       size_t cols,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SICLIP_H */
