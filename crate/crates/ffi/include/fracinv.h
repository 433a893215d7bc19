#ifndef FRACINV_H
#define FRACINV_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FracinvStatus {
  FRACINV_STATUS_OK = 0,
  FRACINV_STATUS_NULL_POINTER = 1,
  FRACINV_STATUS_INVALID_ARGUMENT = 2,
  FRACINV_STATUS_DIMENSION_MISMATCH = 3,
  FRACINV_STATUS_IO = 4,
  FRACINV_STATUS_MALFORMED = 5,
  FRACINV_STATUS_NUMERICAL = 6,
  FRACINV_STATUS_CONFIG = 7,
  FRACINV_STATUS_PANIC = 8,
} FracinvStatus;

/**
 * Fine-grid forward model built from an experiment configuration.
 */
typedef struct FracinvForward FracinvForward;

/**
 * Loaded gPC surrogate.
 */
typedef struct FracinvSurrogate FracinvSurrogate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *fracinv_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fracinv_version(void);

/**
 * `h(x) = 1/2 + atan(x)/π`.
 */
double fracinv_arctan_transform(double x);

/**
 * History weights for step `n`: `b` and `c`, each of length `n`.
 *
 * # Safety
 * `b_out` and `c_out` must each point to `len` writable doubles.
 */
enum FracinvStatus fracinv_caputo_weights(double gamma,
                                          size_t n,
                                          double *b_out,
                                          double *c_out,
                                          size_t len);

/**
 * Load a surrogate from a directory written by the pipeline.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FracinvStatus fracinv_surrogate_load(const char *dir, struct FracinvSurrogate **out);

/**
 * # Safety
 * `h` must come from [`fracinv_surrogate_load`]; output pointers may be null.
 */
enum FracinvStatus fracinv_surrogate_dims(const struct FracinvSurrogate *h,
                                          size_t *n_params,
                                          size_t *n_obs);

/**
 * Evaluate the surrogate at `z` into `out`.
 *
 * # Safety
 * `z` must hold `nz` doubles and `out` have room for `nout`.
 */
enum FracinvStatus fracinv_surrogate_eval(const struct FracinvSurrogate *h,
                                          const double *z,
                                          size_t nz,
                                          double *out,
                                          size_t nout);

/**
 * # Safety
 * `h` must come from [`fracinv_surrogate_load`] and not be used afterwards.
 */
void fracinv_surrogate_free(struct FracinvSurrogate *h);

/**
 * Fine-grid model at the solver step with the configured order, taking KL
 * coefficients. A null path uses the built-in defaults.
 *
 * # Safety
 * `config_path` must be null or NUL-terminated; `out` must be valid.
 */
enum FracinvStatus fracinv_forward_new(const char *config_path, struct FracinvForward **out);

/**
 * # Safety
 * `h` must come from [`fracinv_forward_new`]; output pointers may be null.
 */
enum FracinvStatus fracinv_forward_dims(const struct FracinvForward *h,
                                        size_t *n_params,
                                        size_t *n_obs);

/**
 * Solve at `z` and write the observations into `out`.
 *
 * # Safety
 * `z` must hold `nz` doubles and `out` have room for `nout`.
 */
enum FracinvStatus fracinv_forward_eval(const struct FracinvForward *h,
                                        const double *z,
                                        size_t nz,
                                        double *out,
                                        size_t nout);

/**
 * # Safety
 * `h` must come from [`fracinv_forward_new`] and not be used afterwards.
 */
void fracinv_forward_free(struct FracinvForward *h);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FRACINV_H */
