#ifndef BCL_H
#define BCL_H

/* Generated by cbindgen from bcl-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Scalar fields of a report, for [`bcl_report_metric`].
 */
typedef enum BclMetric {
  BCL_METRIC_MAP_SELF_OLD = 0,
  BCL_METRIC_MAP_SELF_NEW = 1,
  BCL_METRIC_MAP_CROSS = 2,
  BCL_METRIC_RECALL1_SELF_NEW = 3,
  BCL_METRIC_RECALL1_CROSS = 4,
  BCL_METRIC_P_UP = 5,
  BCL_METRIC_P_COMP = 6,
  BCL_METRIC_P1 = 7,
} BclMetric;

/**
 * Result of every fallible call.
 */
typedef enum BclStatus {
  BCL_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  BCL_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  BCL_STATUS_INVALID_UTF8 = 2,
  /**
   * Invalid configuration or invalid combination of inputs.
   */
  BCL_STATUS_CONFIG_ERROR = 3,
  /**
   * File IO or container-format failure.
   */
  BCL_STATUS_IO_ERROR = 4,
  /**
   * Numerical failure (degenerate vectors, non-convergence, bad shapes).
   */
  BCL_STATUS_NUMERIC_ERROR = 5,
  /**
   * The library panicked; state may be inconsistent.
   */
  BCL_STATUS_PANIC = 6,
} BclStatus;

/**
 * Opaque experiment handle (a loaded, validated config).
 */
typedef struct BclExperiment BclExperiment;

/**
 * Opaque evaluation report handle.
 */
typedef struct BclReport BclReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Load and validate an experiment config (TOML). On success writes a new
 * handle to `out`; release it with [`bcl_experiment_free`].
 *
 * # Safety
 * `path` must be a valid NUL-terminated string, `out` a valid pointer.
 */
enum BclStatus bcl_experiment_load(const char *path, struct BclExperiment **out);

/**
 * # Safety
 * `handle` must be null or a pointer from [`bcl_experiment_load`] that has
 * not been freed yet.
 */
void bcl_experiment_free(struct BclExperiment *handle);

/**
 * Generate the dataset container files into the config's output directory.
 *
 * # Safety
 * `handle` must be a live pointer from [`bcl_experiment_load`].
 */
enum BclStatus bcl_gen_data(const struct BclExperiment *handle);

/**
 * Train the old model (cross-entropy only).
 *
 * # Safety
 * `handle` must be a live pointer from [`bcl_experiment_load`].
 */
enum BclStatus bcl_train_old(const struct BclExperiment *handle);

/**
 * Train the new model. `method` selects the compatibility method
 * ("baseline", "ndpp", "ndpp-old", "odpp", "odpp-old"); pass NULL to train
 * an independent new model that needs no old checkpoint.
 *
 * # Safety
 * `handle` must be a live pointer from [`bcl_experiment_load`]; `method`
 * must be null or a valid NUL-terminated string.
 */
enum BclStatus bcl_train_new(const struct BclExperiment *handle, const char *method);

/**
 * Evaluate an old/new checkpoint pair and hand back a report handle.
 * Release it with [`bcl_report_free`].
 *
 * # Safety
 * `handle` must be a live experiment handle; `old_ckpt` and `new_ckpt`
 * valid NUL-terminated paths; `out` a valid pointer.
 */
enum BclStatus bcl_eval(const struct BclExperiment *handle,
                        const char *old_ckpt,
                        const char *new_ckpt,
                        struct BclReport **out);

/**
 * # Safety
 * `report` must be null or a pointer from [`bcl_eval`] not yet freed.
 */
void bcl_report_free(struct BclReport *report);

/**
 * Read one scalar metric out of a report.
 *
 * # Safety
 * `report` must be a live pointer from [`bcl_eval`], `out` a valid pointer.
 */
enum BclStatus bcl_report_metric(const struct BclReport *report,
                                 enum BclMetric metric,
                                 double *out);

/**
 * Whether the report satisfied the empirical compatibility criterion
 * (cross-test above the old self-test). Writes 1 or 0.
 *
 * # Safety
 * `report` must be a live pointer from [`bcl_eval`], `out` a valid pointer.
 */
enum BclStatus bcl_report_compatible(const struct BclReport *report, int32_t *out);

/**
 * Copy the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null (to query the length) or valid for writes of `cap`
 * bytes.
 */
size_t bcl_last_error_message(char *buf, size_t cap);

/**
 * Static name of a status code.
 */
const char *bcl_status_name(enum BclStatus status);

/**
 * Library version as a static string.
 */
const char *bcl_version(void);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* BCL_H */
