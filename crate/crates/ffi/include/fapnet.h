#ifndef FAPNET_H
#define FAPNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FapnetStatus {
  FAPNET_STATUS_OK = 0,
  FAPNET_STATUS_NULL_POINTER = 1,
  FAPNET_STATUS_INVALID_ARGUMENT = 2,
  FAPNET_STATUS_IO = 3,
  FAPNET_STATUS_FORMAT = 4,
  FAPNET_STATUS_RUNTIME = 5,
  FAPNET_STATUS_PANIC = 6,
} FapnetStatus;

/**
 * Opaque model handle.
 */
typedef struct FapnetModel FapnetModel;

/**
 * Scalar metrics of one prediction/ground-truth pair.
 */
typedef struct FapnetMetrics {
  double s_alpha;
  double e_phi_mean;
  double f_beta_mean;
  double f_beta_max;
  double mae;
} FapnetMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *fapnet_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fapnet_version(void);

/**
 * Loads a training checkpoint. On success `*out` receives a handle that
 * must be released with [`fapnet_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum FapnetStatus fapnet_model_load(const char *path, struct FapnetModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from [`fapnet_model_load`] not yet freed.
 */
void fapnet_model_free(struct FapnetModel *model);

/**
 * Network input resolution used by [`fapnet_model_predict`], or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t fapnet_model_input_size(const struct FapnetModel *model);

/**
 * Predicts a saliency map for an interleaved RGB image (`height` rows of
 * `width * 3` bytes). `out_map` receives `width * height` values in `[0, 1]`.
 *
 * # Safety
 * `rgb` must point to `width * height * 3` readable bytes and `out_map` to
 * `width * height` writable floats.
 */
enum FapnetStatus fapnet_model_predict(const struct FapnetModel *model,
                                       const uint8_t *rgb,
                                       size_t width,
                                       size_t height,
                                       float *out_map);

/**
 * Scores a prediction (`width * height` floats, min-max normalized when
 * outside `[0, 1]`) against a mask (`width * height` bytes, foreground >= 128)
 * with the default metric settings.
 *
 * # Safety
 * `pred` and `gt` must point to `width * height` readable elements and
 * `out` must be writable.
 */
enum FapnetStatus fapnet_eval_pair(const float *pred,
                                   const uint8_t *gt,
                                   size_t width,
                                   size_t height,
                                   struct FapnetMetrics *out);

/**
 * One-pixel boundary of a binary mask (foreground >= 128). `out_edge`
 * receives 1 on boundary pixels and 0 elsewhere.
 *
 * # Safety
 * `mask` must point to `width * height` readable bytes and `out_edge` to as many writable bytes.
 */
enum FapnetStatus fapnet_extract_edge(const uint8_t *mask,
                                      size_t width,
                                      size_t height,
                                      uint8_t *out_edge);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FAPNET_H */
