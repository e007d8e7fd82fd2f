/* C interface to the gradient-bridge label-recovery laboratory. */

#ifndef GDBR_H
#define GDBR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible function.
 */
typedef enum GdbrStatus {
  GDBR_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  GDBR_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  GDBR_STATUS_INVALID_UTF8 = 2,
  /**
   * The configuration document was rejected.
   */
  GDBR_STATUS_INVALID_CONFIG = 3,
  /**
   * The experiment or attack failed at runtime.
   */
  GDBR_STATUS_RUNTIME_ERROR = 4,
} GdbrStatus;

/**
 * Opaque handle over a prepared experiment (config plus materialized
 * datasets).
 */
typedef struct GdbrExperiment GdbrExperiment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *gdbr_last_error_message(void);

/**
 * Library version as a static string; do not free.
 */
const char *gdbr_version(void);

/**
 * Parses an experiment config JSON document and prepares its datasets.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out_experiment` a
 * valid pointer. On success `*out_experiment` owns the handle until
 * [`gdbr_experiment_free`].
 */
enum GdbrStatus gdbr_experiment_new(const char *config_json,
                                    struct GdbrExperiment **out_experiment);

/**
 * Releases a handle returned by [`gdbr_experiment_new`]. Null is ignored.
 *
 * # Safety
 * The handle must not be used afterwards.
 */
void gdbr_experiment_free(struct GdbrExperiment *experiment);

/**
 * Runs one trial (seeded exactly like trial `trial_index` of a full run)
 * and returns its report as a JSON string.
 *
 * # Safety
 * `experiment` must be a live handle and `out_json` a valid pointer; the
 * returned string is released with [`gdbr_string_free`].
 */
enum GdbrStatus gdbr_experiment_run_trial(const struct GdbrExperiment *experiment,
                                          uint64_t trial_index,
                                          char **out_json);

/**
 * Runs all R repetitions and returns the aggregated run report as JSON.
 *
 * # Safety
 * Same contract as [`gdbr_experiment_run_trial`].
 */
enum GdbrStatus gdbr_experiment_run(const struct GdbrExperiment *experiment, char **out_json);

/**
 * Label recovery from an already-bridged logit gradient:
 * writes `round(B * (p_tilde - grad_z))` into `out_counts`.
 *
 * # Safety
 * `p_tilde`, `grad_z` and `out_counts` must point to `class_count`
 * readable/writable elements.
 */
enum GdbrStatus gdbr_recover_label_counts(const double *p_tilde,
                                          const double *grad_z,
                                          uintptr_t class_count,
                                          uint64_t batch_size,
                                          uint64_t *out_counts);

/**
 * Runs the gradient-identity suite; reports how many checks passed.
 *
 * # Safety
 * `out_passed` and `out_total` must be valid pointers.
 */
enum GdbrStatus gdbr_verify(uint64_t seed, uintptr_t *out_passed, uintptr_t *out_total);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * The pointer must originate from this library and not be freed twice.
 */
void gdbr_string_free(char *text);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GDBR_H */
