#ifndef REST_H
#define REST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum RestStatus {
  REST_STATUS_OK = 0,
  REST_STATUS_NULL_ARGUMENT = 1,
  REST_STATUS_INVALID_UTF8 = 2,
  REST_STATUS_CONFIG = 3,
  REST_STATUS_TRAINING_ABORTED = 4,
  REST_STATUS_IO = 5,
  REST_STATUS_OUT_OF_RANGE = 6,
  REST_STATUS_PANIC = 7,
} RestStatus;

/**
 * A parsed run configuration.
 */
typedef struct RestConfig RestConfig;

/**
 * Metrics rows produced by [`rest_run`].
 */
typedef struct RestRunResult RestRunResult;

/**
 * Numeric columns of one metrics row.
 */
typedef struct RestMetrics {
  uint64_t seed;
  uint64_t step;
  double density;
  double conflict_ratio;
  double beta;
  double train_loss;
  double overall_acc;
  double unbiased_acc;
  double conflicting_acc;
  double worst_group_acc;
  uint64_t params_active;
  uint64_t cumulative_train_flops;
} RestMetrics;

/**
 * Parameter and FLOP counts of a configured model.
 */
typedef struct RestFlops {
  uint64_t params_total;
  uint64_t params_active;
  uint64_t infer_flops_per_example;
  uint64_t train_flops_per_step;
  uint64_t dense_train_flops_per_step;
} RestFlops;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *rest_last_error(void);

/**
 * Parses `key = value` config text. With `strict == 0` unknown keys are
 * ignored.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RestStatus rest_config_parse(const char *text, int32_t strict, struct RestConfig **out);

/**
 * # Safety
 * `config` must come from [`rest_config_parse`] or be null.
 */
void rest_config_free(struct RestConfig *config);

/**
 * Trains every seed and writes the metrics CSV to `out_csv`. On success
 * `*out` receives the rows. If training aborts, the partial CSV and its
 * `.partial` marker are still written.
 *
 * # Safety
 * `config` must be a live handle, `seeds` must point to `n_seeds` values,
 * `out_csv` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RestStatus rest_run(const struct RestConfig *config,
                         const uint64_t *seeds,
                         uintptr_t n_seeds,
                         const char *out_csv,
                         struct RestRunResult **out);

/**
 * # Safety
 * `result` must be a live handle or null.
 */
uintptr_t rest_run_result_len(const struct RestRunResult *result);

/**
 * Copies row `index` into `*out`.
 *
 * # Safety
 * `result` must be a live handle and `out` a valid pointer.
 */
enum RestStatus rest_run_result_row(const struct RestRunResult *result,
                                    uintptr_t index,
                                    struct RestMetrics *out);

/**
 * # Safety
 * `result` must come from [`rest_run`] or be null.
 */
void rest_run_result_free(struct RestRunResult *result);

/**
 * Parameter and FLOP counts at the configured density.
 *
 * # Safety
 * `config` must be a live handle and `out` a valid pointer.
 */
enum RestStatus rest_flops(const struct RestConfig *config, struct RestFlops *out);

/**
 * Writes `train.rstd` and `test.rstd` under `dir`.
 *
 * # Safety
 * `config` must be a live handle and `dir` a NUL-terminated string.
 */
enum RestStatus rest_gen_data(const struct RestConfig *config, const char *dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REST_H */
