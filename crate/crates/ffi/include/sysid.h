#ifndef SYSID_H
#define SYSID_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SysidStatus {
  SYSID_STATUS_OK = 0,
  SYSID_STATUS_NULL_POINTER = 1,
  SYSID_STATUS_CONFIG = 2,
  SYSID_STATUS_DATA = 3,
  SYSID_STATUS_NUMERICAL = 4,
  SYSID_STATUS_BUFFER_TOO_SMALL = 5,
  SYSID_STATUS_PANIC = 6,
} SysidStatus;

/**
 * Input/output record.
 */
typedef struct SysidData SysidData;

/**
 * Extended Kalman filter over a linear model.
 */
typedef struct SysidEkf SysidEkf;

/**
 * Trained model of any kind.
 */
typedef struct SysidModel SysidModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *sysid_last_error(void);

/**
 * Library version as a static string.
 */
const char *sysid_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void sysid_string_free(char *s);

/**
 * Builds a record from `n x nu` inputs and `n x ny` outputs.
 *
 * # Safety
 * `u` and `y` must point to `n*nu` and `n*ny` doubles; `out` must be
 * writable.
 */
enum SysidStatus sysid_data_new(uintptr_t n,
                                uintptr_t nu,
                                const double *u,
                                uintptr_t ny,
                                const double *y,
                                double sample_time,
                                struct SysidData **out);

/**
 * # Safety
 * `data` must come from this library and not have been freed.
 */
void sysid_data_free(struct SysidData *data);

/**
 * Writes the sample count and channel counts.
 *
 * # Safety
 * Pointers must be valid; any output pointer may be null.
 */
enum SysidStatus sysid_data_shape(const struct SysidData *data,
                                  uintptr_t *n,
                                  uintptr_t *nu,
                                  uintptr_t *ny);

/**
 * Copies the `n x ny` outputs into `out`.
 *
 * # Safety
 * `out` must hold `len` doubles.
 */
enum SysidStatus sysid_data_outputs(const struct SysidData *data, double *out, uintptr_t len);

/**
 * Generates a benchmark data set and splits it 70/30.
 *
 * # Safety
 * `system` must be a NUL-terminated string; `estimation` and `validation`
 * must be writable.
 */
enum SysidStatus sysid_benchgen(const char *system,
                                uintptr_t n,
                                uint64_t seed,
                                struct SysidData **estimation,
                                struct SysidData **validation);

/**
 * Parses a model document.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum SysidStatus sysid_model_from_json(const char *json, struct SysidModel **out);

/**
 * Reads a model document from a file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SysidStatus sysid_model_load(const char *path, struct SysidModel **out);

/**
 * Serializes a model; release the string with [`sysid_string_free`].
 *
 * # Safety
 * `model` must be valid; `out` must be writable.
 */
enum SysidStatus sysid_model_to_json(const struct SysidModel *model, char **out);

/**
 * # Safety
 * `model` must come from this library and not have been freed.
 */
void sysid_model_free(struct SysidModel *model);

/**
 * Model kind as a static string: `neural_state_space`, `nlarx` or
 * `hammerstein_wiener`. Null for a null handle.
 *
 * # Safety
 * `model` must be valid or null.
 */
const char *sysid_model_kind(const struct SysidModel *model);

/**
 * Free-run simulation on the inputs of `data`, with initial conditions
 * taken from its measured outputs. Writes `rows x channels` values
 * row-major; nonlinear ARX models skip their first `max_lag` samples.
 *
 * # Safety
 * `out` must hold `len` doubles; `rows` and `cols` may be null.
 */
enum SysidStatus sysid_model_simulate(const struct SysidModel *model,
                                      const struct SysidData *data,
                                      double *out,
                                      uintptr_t len,
                                      uintptr_t *rows,
                                      uintptr_t *cols);

/**
 * Simulation fit percent per output channel.
 *
 * # Safety
 * `out` must hold `len` doubles.
 */
enum SysidStatus sysid_model_fit(const struct SysidModel *model,
                                 const struct SysidData *data,
                                 double *out,
                                 uintptr_t len);

/**
 * Filter for `x(k+1) = A x + B u`, `y = C x + D u` with `nx` states, `nu`
 * inputs and `ny` outputs. `p0`, `q` (`nx x nx`) and `r` (`ny x ny`) are
 * full covariance matrices.
 *
 * # Safety
 * Every array must hold the number of doubles its shape implies; `out`
 * must be writable.
 */
enum SysidStatus sysid_ekf_new_linear(uintptr_t nx,
                                      uintptr_t nu,
                                      uintptr_t ny,
                                      const double *a,
                                      const double *b,
                                      const double *c,
                                      const double *d,
                                      const double *x0,
                                      const double *p0,
                                      const double *q,
                                      const double *r,
                                      struct SysidEkf **out);

/**
 * # Safety
 * `ekf` must come from this library and not have been freed.
 */
void sysid_ekf_free(struct SysidEkf *ekf);

/**
 * Time update with input `u` (`nu` values).
 *
 * # Safety
 * `u` must hold `nu` doubles.
 */
enum SysidStatus sysid_ekf_predict(struct SysidEkf *ekf, const double *u, uintptr_t nu);

/**
 * Measurement update. The innovation (`ny` values) is written to
 * `innovation` when it is not null.
 *
 * # Safety
 * `y` must hold `ny` doubles, `u` `nu` doubles, `innovation` `ny` doubles
 * or be null.
 */
enum SysidStatus sysid_ekf_correct(struct SysidEkf *ekf,
                                   const double *y,
                                   uintptr_t ny,
                                   const double *u,
                                   uintptr_t nu,
                                   double *innovation);

/**
 * Copies the state estimate (`nx` values) and, when `p` is not null, the
 * covariance (`nx * nx` values, row-major).
 *
 * # Safety
 * `x` must hold `nx` doubles; `p` must hold `nx * nx` doubles or be null.
 */
enum SysidStatus sysid_ekf_state(const struct SysidEkf *ekf, double *x, uintptr_t nx, double *p);

/**
 * Runs the `sysid` command line with `argc` arguments (the program name
 * first) and returns its exit code.
 *
 * # Safety
 * `argv` must hold `argc` NUL-terminated strings.
 */
int sysid_cli_run(int argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SYSID_H */
