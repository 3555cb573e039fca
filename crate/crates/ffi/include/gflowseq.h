#ifndef GFLOWSEQ_H
#define GFLOWSEQ_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum GfsStatus {
  GFS_OK = 0,
  GFS_NULL_POINTER = 1,
  GFS_INVALID_UTF8 = 2,
  /**
   * Bad JSON, unknown field or out-of-range setting.
   */
  GFS_CONFIG = 3,
  /**
   * Requested operation is not defined for this environment.
   */
  GFS_UNSUPPORTED = 4,
  /**
   * Training diverged (non-finite or runaway loss).
   */
  GFS_DIVERGED = 5,
  GFS_IO = 6,
  GFS_BUFFER_TOO_SMALL = 7,
  /**
   * Any other runtime failure.
   */
  GFS_RUNTIME = 8,
  GFS_PANIC = 9,
} GfsStatus;

/**
 * A policy network with its parameters.
 */
typedef struct GfsPolicy GfsPolicy;

/**
 * A training run over one environment.
 */
typedef struct GfsTrainer GfsTrainer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *gfs_version(void);

/**
 * Copies the calling thread's last error message into `buf`.
 *
 * # Safety
 * `buf` must be null or valid for `cap` bytes; `needed` null or writable.
 */
enum GfsStatus gfs_last_error(char *buf, size_t cap, size_t *needed);

/**
 * Creates a freshly initialised policy from a policy config JSON object
 * (`"{}"` for defaults).
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` must be writable.
 */
enum GfsStatus gfs_policy_new(const char *config_json, uint64_t seed, struct GfsPolicy **out);

/**
 * Loads `policy.bin`/`policy.json` from `dir`; shapes must match the config.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum GfsStatus gfs_policy_load(const char *config_json, const char *dir, struct GfsPolicy **out);

/**
 * Writes `policy.bin`/`policy.json` into `dir`.
 *
 * # Safety
 * `policy` must come from this library; `dir` must be NUL-terminated.
 */
enum GfsStatus gfs_policy_save(const struct GfsPolicy *policy, const char *dir);

/**
 * # Safety
 * `policy` must be null or a handle not yet freed.
 */
void gfs_policy_free(struct GfsPolicy *policy);

/**
 * Number of scalar parameters, or 0 for a null handle.
 *
 * # Safety
 * `policy` must be null or a live handle.
 */
size_t gfs_policy_num_parameters(const struct GfsPolicy *policy);

/**
 * Samples one episode and writes it as a JSON trajectory.
 *
 * # Safety
 * Pointers must be valid as described in the module docs.
 */
enum GfsStatus gfs_policy_sample(const struct GfsPolicy *policy,
                                 const char *env_json,
                                 uint64_t seed,
                                 char *buf,
                                 size_t cap,
                                 size_t *needed);

/**
 * Log-probability of the actions of a JSON trajectory under the policy.
 *
 * # Safety
 * Pointers must be valid as described in the module docs.
 */
enum GfsStatus gfs_policy_log_prob(const struct GfsPolicy *policy,
                                   const char *trajectory_json,
                                   double *out);

/**
 * Writes the exact target distribution of an enumerable environment as a
 * JSON object mapping trajectory keys to probabilities.
 *
 * # Safety
 * Pointers must be valid as described in the module docs.
 */
enum GfsStatus gfs_oracle_distribution(const char *env_json, char *buf, size_t cap, size_t *needed);

/**
 * Builds a trainer from a full run config JSON, running SFT first when
 * the config enables it.
 *
 * # Safety
 * `run_config_json` must be NUL-terminated; `out` must be writable.
 */
enum GfsStatus gfs_trainer_new(const char *run_config_json, struct GfsTrainer **out);

/**
 * # Safety
 * `trainer` must be null or a handle not yet freed.
 */
void gfs_trainer_free(struct GfsTrainer *trainer);

/**
 * Runs up to `n` further tasks (stopping at the configured total) and
 * reports the loss of the last one. `last_loss` may be null.
 *
 * # Safety
 * `trainer` must be a live handle.
 */
enum GfsStatus gfs_trainer_run(struct GfsTrainer *trainer, size_t n, double *last_loss);

/**
 * Optimizer updates taken so far, or 0 for a null handle.
 *
 * # Safety
 * `trainer` must be null or a live handle.
 */
size_t gfs_trainer_step(const struct GfsTrainer *trainer);

/**
 * Copies the current policy into a new handle owned by the caller.
 *
 * # Safety
 * `trainer` must be a live handle; `out` must be writable.
 */
enum GfsStatus gfs_trainer_policy(const struct GfsTrainer *trainer, struct GfsPolicy **out);

/**
 * Saves parameters, optimizer moments and metrics into `dir`.
 *
 * # Safety
 * `trainer` must be a live handle; `dir` must be NUL-terminated.
 */
enum GfsStatus gfs_trainer_save(const struct GfsTrainer *trainer, const char *dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GFLOWSEQ_H */
