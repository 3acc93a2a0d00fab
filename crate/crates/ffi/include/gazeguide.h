#ifndef GAZEGUIDE_H
#define GAZEGUIDE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GgStatus {
  GG_STATUS_OK = 0,
  GG_STATUS_NULL_POINTER = 1,
  GG_STATUS_INVALID_INPUT = 2,
  GG_STATUS_INVALID_CONFIG = 3,
  GG_STATUS_IO = 4,
  GG_STATUS_NON_FINITE = 5,
  GG_STATUS_OUT_OF_RANGE = 6,
  GG_STATUS_PANIC = 7,
} GgStatus;

typedef struct GgBoxList GgBoxList;

typedef struct GgDetectionList GgDetectionList;

typedef struct GgDetector GgDetector;

typedef struct GgGazeParams {
  double sigma_px;
  double tau_rel;
  size_t min_area_px;
  double overlap_tau;
} GgGazeParams;

typedef struct GgGazePoint {
  double t_ms;
  double x_px;
  double y_px;
  double dur_ms;
} GgGazePoint;

/**
 * Normalized box: center and size as fractions of the image side.
 */
typedef struct GgBox {
  double cx;
  double cy;
  double w;
  double h;
} GgBox;

typedef struct GgDetection {
  struct GgBox bbox;
  double score;
} GgDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *gg_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gg_version(void);

/**
 * Default gaze-processing parameters.
 */
struct GgGazeParams gg_gaze_params_default(void);

/**
 * Gaze-only boxes for one image: heatmap, threshold, components, and removal
 * of regions overlapping a candida annotation. `params` may be null for the
 * defaults. On success `*out` owns a new list.
 *
 * # Safety
 * Array arguments must hold the stated number of elements; `out` must be
 * writable.
 */
enum GgStatus gg_process_gaze(const struct GgGazePoint *trace,
                              size_t n_trace,
                              const struct GgBox *candida,
                              size_t n_candida,
                              const struct GgGazeParams *params,
                              size_t height,
                              size_t width,
                              struct GgBoxList **out);

/**
 * Number of boxes in `list` (0 for null).
 *
 * # Safety
 * `list` must be null or a live list.
 */
size_t gg_box_list_len(const struct GgBoxList *list);

/**
 * # Safety
 * `list` must be null or a live list; `out` must be writable.
 */
enum GgStatus gg_box_list_get(const struct GgBoxList *list, size_t index, struct GgBox *out);

/**
 * # Safety
 * `list` must be null or a list not yet freed.
 */
void gg_box_list_free(struct GgBoxList *list);

/**
 * Minimum-cost assignment on a row-major `rows x cols` matrix. Writes
 * `min(rows, cols)` pairs, sorted by row, into `out_rows`/`out_cols`
 * (each with room for that many) and the count into `*out_len`.
 *
 * # Safety
 * `cost` must hold `rows * cols` values; output buffers must be writable.
 */
enum GgStatus gg_hungarian(const double *cost,
                           size_t rows,
                           size_t cols,
                           size_t *out_rows,
                           size_t *out_cols,
                           size_t *out_len);

/**
 * Loads a checkpoint directory (`params.bin` + `meta.json`).
 *
 * # Safety
 * `dir` must be a NUL-terminated UTF-8 path; `out` must be writable.
 */
enum GgStatus gg_detector_load(const char *dir, struct GgDetector **out);

/**
 * An untrained detector with the default configuration.
 *
 * # Safety
 * `out` must be writable.
 */
enum GgStatus gg_detector_new_default(uint64_t seed, struct GgDetector **out);

/**
 * # Safety
 * `det` must be null or a detector not yet freed.
 */
void gg_detector_free(struct GgDetector *det);

/**
 * Candida detections scoring at least `conf_threshold` on an 8-bit
 * grayscale image (row-major, `width * height` bytes), highest score first.
 *
 * # Safety
 * `det` must be a live detector, `pixels` must hold `width * height` bytes
 * and `out` must be writable.
 */
enum GgStatus gg_detector_predict(const struct GgDetector *det,
                                  const uint8_t *pixels,
                                  size_t width,
                                  size_t height,
                                  double conf_threshold,
                                  struct GgDetectionList **out);

/**
 * # Safety
 * `list` must be null or a live list.
 */
size_t gg_detection_list_len(const struct GgDetectionList *list);

/**
 * # Safety
 * `list` must be null or a live list; `out` must be writable.
 */
enum GgStatus gg_detection_list_get(const struct GgDetectionList *list,
                                    size_t index,
                                    struct GgDetection *out);

/**
 * # Safety
 * `list` must be null or a list not yet freed.
 */
void gg_detection_list_free(struct GgDetectionList *list);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GAZEGUIDE_H */
