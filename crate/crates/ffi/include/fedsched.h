#ifndef FEDSCHED_H
#define FEDSCHED_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FsStatus {
  FS_STATUS_OK = 0,
  FS_STATUS_NULL_POINTER = 1,
  FS_STATUS_INVALID_ARGUMENT = 2,
  FS_STATUS_INVALID_CONFIG = 3,
  FS_STATUS_CONFIG_PARSE = 4,
  FS_STATUS_DIVERGED = 5,
  FS_STATUS_IO = 6,
  FS_STATUS_PANIC = 7,
} FsStatus;

// Parsed run configuration.
typedef struct FsConfig FsConfig;

// Metrics of a finished or diverged run.
typedef struct FsRun FsRun;

// One metrics row. Accuracy fields are NaN for the quadratic model.
typedef struct FsMetricsRow {
  uint64_t round;
  double train_loss;
  double train_accuracy;
  double test_loss;
  double test_accuracy;
  double alpha;
  double beta_mean;
  double beta_min;
  double beta_max;
  uint64_t wall_ms;
} FsMetricsRow;

typedef struct FsBoundParams {
  double gamma_alpha;
  double gamma_beta;
  double sigma_sq;
  double rho_sq;
  uint64_t clients;
  uint64_t local_steps;
  uint64_t rounds;
} FsBoundParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or null. Valid until
// the next `fs_*` call on the same thread.
const char *fs_last_error_message(void);

// Parses config text (the `key = value` file format) into `*out`.
//
// # Safety
// `text` must be a NUL-terminated string and `out` a writable pointer.
enum FsStatus fs_config_parse(const char *text, struct FsConfig **out);

// # Safety
// `config` must come from `fs_config_parse` and not be used afterwards.
void fs_config_free(struct FsConfig *config);

// # Safety
// `config` must be a live handle.
enum FsStatus fs_config_set_seed(struct FsConfig *config, uint64_t seed);

// # Safety
// `config` must be a live handle.
enum FsStatus fs_config_set_workers(struct FsConfig *config, size_t workers);

// Runs the experiment. On `FS_STATUS_DIVERGED` a handle holding the rows
// completed before the failure is still written to `*out`.
//
// # Safety
// `config` must be a live handle and `out` a writable pointer.
enum FsStatus fs_run(const struct FsConfig *config, struct FsRun **out);

// # Safety
// `run` must be a live handle or null.
size_t fs_run_len(const struct FsRun *run);

// # Safety
// `run` must be a live handle and `out` a writable pointer.
enum FsStatus fs_run_row(const struct FsRun *run, size_t index, struct FsMetricsRow *out);

// Writes the metrics file format to `path`.
//
// # Safety
// `run` must be a live handle and `path` a NUL-terminated string.
enum FsStatus fs_run_write_csv(const struct FsRun *run, const char *path);

// # Safety
// `run` must come from `fs_run` and not be used afterwards.
void fs_run_free(struct FsRun *run);

// Evaluates `P`, `Q` and the bound. Any output pointer may be null.
//
// # Safety
// `params` must be readable; non-null outputs must be writable.
enum FsStatus fs_bound(const struct FsBoundParams *params,
                       double *out_p,
                       double *out_q,
                       double *out_bound);

// One global hypergradient step on `alpha`. `prev` may be null on the
// first round, in which case `alpha` is returned unchanged.
//
// # Safety
// `delta` (and `prev` when non-null) must point to `len` doubles.
enum FsStatus fs_fedhyper_g_step(double alpha,
                                 const double *delta,
                                 const double *prev,
                                 size_t len,
                                 double gamma_alpha,
                                 double *out_alpha);

// FedExp rate from `m` row-major local updates of length `dim`.
//
// # Safety
// `updates` must hold `m * dim` doubles and `delta` `dim` doubles.
enum FsStatus fs_fedexp_step(const double *updates,
                             size_t m,
                             size_t dim,
                             const double *delta,
                             double epsilon,
                             double *out_alpha);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDSCHED_H */
