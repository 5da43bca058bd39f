#ifndef SAF_H
#define SAF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SafStatus {
  SAF_STATUS_OK = 0,
  SAF_STATUS_NULL_ARGUMENT = 1,
  SAF_STATUS_INVALID_UTF8 = 2,
  SAF_STATUS_CONFIG = 3,
  SAF_STATUS_IO = 4,
  SAF_STATUS_FORMAT = 5,
  SAF_STATUS_NUMERIC = 6,
  SAF_STATUS_SHAPE = 7,
  SAF_STATUS_CONTRACT = 8,
  SAF_STATUS_UNAVAILABLE = 9,
  SAF_STATUS_OUT_OF_RANGE = 10,
  SAF_STATUS_PANIC = 11,
} SafStatus;

/**
 * Training configuration. Create with [`saf_config_new`] or
 * [`saf_config_load`].
 */
typedef struct SafConfig SafConfig;

/**
 * Completed training run.
 */
typedef struct SafRun SafRun;

/**
 * One row of the per-epoch metrics table.
 */
typedef struct SafMetricsRow {
  uint64_t epoch;
  double train_loss;
  double train_acc;
  double test_loss;
  double test_acc;
  double trajectory_loss;
  double sharpness_exact;
  double sharpness_proxy;
  double lr;
  uint64_t epoch_wall_ms;
} SafMetricsRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread, or null if none.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *saf_last_error(void);

/**
 * Default configuration for `optimizer` (`"sgd"`, `"sam"`, `"saf"` or `"mesa"`).
 *
 * # Safety
 * `optimizer` must be a nul-terminated string and `out` a writable pointer.
 */
enum SafStatus saf_config_new(const char *optimizer, struct SafConfig **out);

/**
 * Reads a `key = value` config file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a writable pointer.
 */
enum SafStatus saf_config_load(const char *path, struct SafConfig **out);

/**
 * Sets one config key. The config is left unchanged on failure.
 *
 * # Safety
 * `config` must come from this library; `key` and `value` must be
 * nul-terminated strings.
 */
enum SafStatus saf_config_set(struct SafConfig *config, const char *key, const char *value);

/**
 * # Safety
 * `config` must be null or come from this library and not be used afterwards.
 */
void saf_config_free(struct SafConfig *config);

/**
 * Trains to completion. Writes outputs only if `out_dir` is set in the config.
 *
 * # Safety
 * `config` must come from this library and `out` be a writable pointer.
 */
enum SafStatus saf_run(const struct SafConfig *config, struct SafRun **out);

/**
 * Number of completed epochs, i.e. metrics rows.
 *
 * # Safety
 * `run` must come from this library.
 */
size_t saf_run_epochs(const struct SafRun *run);

/**
 * Copies metrics row `index` (0-based) into `out`.
 *
 * # Safety
 * `run` must come from this library and `out` be a writable pointer.
 */
enum SafStatus saf_run_metrics(const struct SafRun *run, size_t index, struct SafMetricsRow *out);

/**
 * Copies the final weights into `buf` if it holds at least as many values.
 * `len_out` always receives the number of weights, so a null `buf` queries
 * the size.
 *
 * # Safety
 * `run` must come from this library, `len_out` be writable, and `buf`
 * either null or valid for `capacity` doubles.
 */
enum SafStatus saf_run_weights(const struct SafRun *run,
                               double *buf,
                               size_t capacity,
                               size_t *len_out);

/**
 * # Safety
 * `run` must be null or come from this library and not be used afterwards.
 */
void saf_run_free(struct SafRun *run);

/**
 * Bytes needed to keep `lag` epochs of float32 outputs for `examples`
 * examples and `classes` classes.
 */
uint64_t saf_memory_model_bytes(uint64_t examples, uint64_t classes, uint64_t lag);

/**
 * Cosine-annealed learning rate at `step` of `total_steps`.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum SafStatus saf_cosine_lr(double peak, size_t step, size_t total_steps, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAF_H */
