/* C interface of the pairdet detector. */

#ifndef PAIRDET_H
#define PAIRDET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every C-ABI call.
 */
typedef enum PdStatus {
  PD_STATUS_OK = 0,
  /**
   * A bad argument or inconsistent configuration.
   */
  PD_STATUS_INVALID = 1,
  /**
   * The filesystem said no.
   */
  PD_STATUS_IO = 2,
  /**
   * Training or inference failed at runtime.
   */
  PD_STATUS_RUNTIME = 3,
} PdStatus;

/**
 * Opaque handle to a loaded detector.
 */
typedef struct PdDetector PdDetector;

/**
 * One detection: box corners in image pixels, confidence, class id.
 */
typedef struct PdDetection {
  double x_min;
  double y_min;
  double x_max;
  double y_max;
  double score;
  uint32_t class_id;
} PdDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *pd_last_error_message(void);

/**
 * Generate the synthetic dataset (images plus train/test manifests)
 * under `out_dir` with the given seed.
 *
 * # Safety
 * `out_dir` must be a valid NUL-terminated string.
 */
enum PdStatus pd_generate(const char *out_dir, uint64_t seed);

/**
 * Train a detector. `config_toml` may be null for the default
 * configuration; `seed` and `iterations` override the configuration when
 * non-negative. The two `disable_*` flags zero the corresponding loss
 * weights.
 *
 * # Safety
 * All pointer arguments must be valid NUL-terminated strings (or null
 * where documented).
 */
enum PdStatus pd_train(const char *manifest,
                       const char *out_dir,
                       const char *config_toml,
                       int64_t seed,
                       int64_t iterations,
                       bool disable_tlloss,
                       bool disable_simloss);

/**
 * Evaluate a checkpoint against a manifest, writing report.json and
 * roc.csv under `out_dir`.
 *
 * # Safety
 * All pointer arguments must be valid NUL-terminated strings.
 */
enum PdStatus pd_evaluate(const char *checkpoint, const char *manifest, const char *out_dir);

/**
 * Load a detector from a checkpoint file. On success `*out` owns the
 * handle; release it with `pd_detector_close`.
 *
 * # Safety
 * `checkpoint` must be a valid NUL-terminated string and `out` a valid
 * pointer.
 */
enum PdStatus pd_detector_open(const char *checkpoint, struct PdDetector **out);

/**
 * Release a detector handle. Null is a no-op.
 *
 * # Safety
 * `handle` must come from `pd_detector_open` and not be used afterwards.
 */
void pd_detector_close(struct PdDetector *handle);

/**
 * Run detection on a grayscale PNG. Up to `cap` detections are written
 * to `out` in descending score order; `*out_count` receives the number
 * written.
 *
 * # Safety
 * `handle` must be a live handle, `image_path` a valid NUL-terminated
 * string, `out` an array of at least `cap` entries, and `out_count` a
 * valid pointer.
 */
enum PdStatus pd_detector_detect(const struct PdDetector *handle,
                                 const char *image_path,
                                 struct PdDetection *out,
                                 uintptr_t cap,
                                 uintptr_t *out_count);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* PAIRDET_H */
