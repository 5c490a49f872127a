#ifndef UDALM_H
#define UDALM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UdalmStatus {
  UDALM_STATUS_OK = 0,
  UDALM_STATUS_NULL_POINTER = 1,
  UDALM_STATUS_INVALID_ARGUMENT = 2,
  UDALM_STATUS_IO = 3,
  UDALM_STATUS_CHECKPOINT = 4,
  UDALM_STATUS_INPUT = 5,
  UDALM_STATUS_INTERNAL = 6,
} UdalmStatus;

/*
 Opaque model handle.
 */
typedef struct UdalmModel UdalmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer is
 valid until the next call into this library on the same thread.
 */
const char *udalm_last_error_message(void);

/*
 Loads a checkpoint and stores a new handle in `*out`.

 # Safety
 `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum UdalmStatus udalm_model_load(const char *path, struct UdalmModel **out);

/*
 Releases a handle. Null is ignored.

 # Safety
 `model` must come from [`udalm_model_load`] and not be used afterwards.
 */
void udalm_model_free(struct UdalmModel *model);

/*
 Number of landmarks the model predicts, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
size_t udalm_model_num_landmarks(const struct UdalmModel *model);

/*
 Network input size in pixels.

 # Safety
 `model` must be a live handle; `width` and `height` valid pointers.
 */
enum UdalmStatus udalm_model_input_size(const struct UdalmModel *model,
                                        size_t *width,
                                        size_t *height);

/*
 Predicts landmarks on a grayscale image of any size with values in `[0, 1]`.

 The image is resized to the input size and predictions are mapped back to
 its pixel coordinates. Writes `L` `(x, y)` pairs to `coords` (length `2L`)
 and `L` confidences to `confidences`.

 # Safety
 `pixels` must hold `width·height` floats; output buffers must have the sizes above.
 */
enum UdalmStatus udalm_model_predict(const struct UdalmModel *model,
                                     const float *pixels,
                                     size_t width,
                                     size_t height,
                                     double *coords,
                                     double *confidences);

/*
 Landmark-aware selection on an `M×L` confidence table.

 Each landmark keeps its `max(1, floor(ratio·M))` most confident images
 (ties go to the lower row index). Writes `L` thresholds and an `M×L`
 0/1 mask.

 # Safety
 `confidences` and `mask` must hold `M·L` entries, `thresholds` `L`.
 */
enum UdalmStatus udalm_dynamic_thresholds(const double *confidences,
                                          size_t m,
                                          size_t l,
                                          double ratio,
                                          double *thresholds,
                                          uint8_t *mask);

/*
 Per-landmark radial errors in millimetres for `L` landmarks.

 # Safety
 `pred` and `gt` must hold `2L` values, `out` `L`.
 */
enum UdalmStatus udalm_radial_errors(const double *pred,
                                     const double *gt,
                                     size_t l,
                                     double spacing_x,
                                     double spacing_y,
                                     double *out);

/*
 Pooled MRE and SDR (percent, boundary inclusive) over an `N×L` error table.

 # Safety
 `errors` must hold `N·L` values, `radii` and `sdr` `n_radii`, `mre` one.
 */
enum UdalmStatus udalm_aggregate(const double *errors,
                                 size_t n_images,
                                 size_t l,
                                 const double *radii,
                                 size_t n_radii,
                                 double *mre,
                                 double *sdr);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UDALM_H */
