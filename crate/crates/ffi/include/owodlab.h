#ifndef OWODLAB_H
#define OWODLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OwodStatus {
  OWOD_STATUS_OK = 0,
  OWOD_STATUS_NULL_POINTER = 1,
  OWOD_STATUS_CONFIG = 2,
  OWOD_STATUS_DATA = 3,
  OWOD_STATUS_DIVERGENCE = 4,
  OWOD_STATUS_STATE = 5,
  OWOD_STATUS_IO = 6,
  OWOD_STATUS_BUFFER_TOO_SMALL = 7,
  OWOD_STATUS_PANIC = 8,
} OwodStatus;

/**
 * Opaque adaptive-weight controller.
 */
typedef struct OwodController OwodController;

/**
 * Opaque detector.
 */
typedef struct OwodDetector OwodDetector;

/**
 * Controller hyperparameters. A negative `start` means "equal to `total`".
 */
typedef struct OwodControllerConfig {
  size_t recent;
  size_t total;
  size_t cycle;
  int64_t start;
  double pi_pma;
  double pi_nma;
  double initial_w_m;
  double initial_w_i;
} OwodControllerConfig;

/**
 * One detection; `class_id` is -1 for "unknown". Corners are normalised.
 */
typedef struct OwodDetection {
  double x1;
  double y1;
  double x2;
  double y2;
  double score;
  int32_t class_id;
} OwodDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *owod_version(void);

/**
 * Message for the last failed call on this thread, or NULL. Valid until
 * the next call into the library from the same thread.
 */
const char *owod_last_error_message(void);

/**
 * Writes the default hyperparameters into `out`.
 *
 * # Safety
 * `out` must point to writable storage.
 */
enum OwodStatus owod_controller_config_default(struct OwodControllerConfig *out);

/**
 * # Safety
 * `config` must point to a valid config; `out` to writable storage.
 */
enum OwodStatus owod_controller_new(const struct OwodControllerConfig *config,
                                    struct OwodController **out);

/**
 * Feeds one iteration's loss. `updated` (optional) is set to 1 when an
 * update cycle ran. The current weights are written to `w_m`/`w_i`
 * (optional).
 *
 * # Safety
 * `handle` must come from [`owod_controller_new`]; outputs may be NULL.
 */
enum OwodStatus owod_controller_step(struct OwodController *handle,
                                     double loss,
                                     int32_t *updated,
                                     double *w_m,
                                     double *w_i);

/**
 * # Safety
 * `handle` must come from [`owod_controller_new`].
 */
enum OwodStatus owod_controller_weights(const struct OwodController *handle,
                                        double *w_m,
                                        double *w_i);

/**
 * Number of losses fed so far.
 *
 * # Safety
 * `handle` must come from [`owod_controller_new`].
 */
enum OwodStatus owod_controller_iteration(const struct OwodController *handle, size_t *out);

/**
 * # Safety
 * `handle` must come from [`owod_controller_new`] and not be used again.
 */
void owod_controller_free(struct OwodController *handle);

/**
 * Fused pseudo-label score `norm_objectness^w_m * max_iou^w_i`.
 */
double owod_fused_score(double norm_objectness, double max_iou, double w_m, double w_i);

/**
 * IOU of two `[x1, y1, x2, y2]` boxes.
 *
 * # Safety
 * `a` and `b` must each point to four doubles.
 */
enum OwodStatus owod_box_iou(const double *a, const double *b, double *out);

/**
 * Generalized IOU of two `[x1, y1, x2, y2]` boxes.
 *
 * # Safety
 * `a` and `b` must each point to four doubles.
 */
enum OwodStatus owod_box_giou(const double *a, const double *b, double *out);

/**
 * Freshly initialised detector with the default configuration.
 *
 * # Safety
 * `out` must point to writable storage.
 */
enum OwodStatus owod_detector_new_default(uint64_t seed, struct OwodDetector **out);

/**
 * Loads a checkpoint written by `owodlab train`/`advance`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable.
 */
enum OwodStatus owod_detector_load(const char *path, struct OwodDetector **out);

/**
 * # Safety
 * `handle` from a detector constructor; `path` NUL-terminated.
 */
enum OwodStatus owod_detector_save(const struct OwodDetector *handle, const char *path);

/**
 * Input side in pixels and number of known-class slots.
 *
 * # Safety
 * `handle` from a detector constructor; outputs may be NULL.
 */
enum OwodStatus owod_detector_shape(const struct OwodDetector *handle,
                                    size_t *image_size,
                                    size_t *num_classes);

/**
 * Runs the detector on a packed RGB image (`width*height*3` bytes, row
 * major). `known` lists the class ids treated as known; the rest can
 * only surface as unknown. Writes up to `capacity` detections and their
 * total into `count`; returns `BufferTooSmall` when they do not fit.
 *
 * # Safety
 * `rgb` must hold `width*height*3` bytes, `known` `num_known` ids and
 * `out` `capacity` elements (may be NULL when `capacity` is 0).
 */
enum OwodStatus owod_detector_detect(const struct OwodDetector *handle,
                                     const uint8_t *rgb,
                                     size_t width,
                                     size_t height,
                                     const uint32_t *known,
                                     size_t num_known,
                                     size_t unknown_top_k,
                                     struct OwodDetection *out,
                                     size_t capacity,
                                     size_t *count);

/**
 * # Safety
 * `handle` from a detector constructor and not used again.
 */
void owod_detector_free(struct OwodDetector *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OWODLAB_H */
