#ifndef SSVB_H
#define SSVB_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SsvbStatus {
  SSVB_STATUS_OK = 0,
  SSVB_STATUS_NULL_POINTER = 1,
  SSVB_STATUS_INVALID_ARGUMENT = 2,
  SSVB_STATUS_INVALID_DATA = 3,
  SSVB_STATUS_NUMERICAL = 4,
  SSVB_STATUS_PANIC = 5,
} SsvbStatus;

/**
 * Solver selector for [`ssvb_fit`].
 */
typedef enum SsvbAlgorithm {
  SSVB_ALGORITHM_COMPONENTWISE = 1,
  SSVB_ALGORITHM_BATCH = 2,
} SsvbAlgorithm;

/**
 * A standardized design and response.
 */
typedef struct SsvbDataset SsvbDataset;

/**
 * A fitted model.
 */
typedef struct SsvbFit SsvbFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies `y` (length `n`) and the row-major `n × p` matrix `x`, centers and
 * scales them, and stores a new dataset handle in `*out`.
 *
 * # Safety
 * `y` must point to `n` doubles, `x` to `n * p` doubles, and `out` to
 * writable storage for one pointer.
 */
enum SsvbStatus ssvb_dataset_new(const double *y,
                                 const double *x,
                                 size_t n,
                                 size_t p,
                                 struct SsvbDataset **out);

/**
 * Number of features in `dataset`, or 0 when it is null.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t ssvb_dataset_p(const struct SsvbDataset *dataset);

/**
 * # Safety
 * `dataset` must be null or a handle from [`ssvb_dataset_new`] that has not
 * been freed.
 */
void ssvb_dataset_free(struct SsvbDataset *dataset);

/**
 * Fits `dataset` with slab scale `v1` and default priors. `algorithm` is an
 * [`SsvbAlgorithm`] value. A run that hits the iteration cap still succeeds;
 * see [`ssvb_fit_converged`].
 *
 * # Safety
 * `dataset` must be a live handle and `out` writable storage for one
 * pointer.
 */
enum SsvbStatus ssvb_fit(const struct SsvbDataset *dataset,
                         int32_t algorithm,
                         double v1,
                         struct SsvbFit **out);

/**
 * 1 when the fit met its convergence tolerance, 0 otherwise (or when null).
 *
 * # Safety
 * `fit` must be null or a live handle.
 */
int32_t ssvb_fit_converged(const struct SsvbFit *fit);

/**
 * Number of features with inclusion probability above 1/2.
 *
 * # Safety
 * `fit` must be null or a live handle.
 */
size_t ssvb_fit_selected_count(const struct SsvbFit *fit);

/**
 * Copies the `p` inclusion probabilities into `out`.
 *
 * # Safety
 * `fit` must be a live handle and `out` must point to `len` writable doubles.
 */
enum SsvbStatus ssvb_fit_phi(const struct SsvbFit *fit, double *out, size_t len);

/**
 * Copies the `p` slab means (standardized scale) into `out`.
 *
 * # Safety
 * `fit` must be a live handle and `out` must point to `len` writable doubles.
 */
enum SsvbStatus ssvb_fit_mu(const struct SsvbFit *fit, double *out, size_t len);

/**
 * Serializes the fit as JSON into a new string owned by the caller; free it
 * with [`ssvb_string_free`].
 *
 * # Safety
 * `fit` must be a live handle and `out` writable storage for one pointer.
 */
enum SsvbStatus ssvb_fit_to_json(const struct SsvbFit *fit, char **out);

/**
 * # Safety
 * `fit` must be null or a handle from [`ssvb_fit`] that has not been freed.
 */
void ssvb_fit_free(struct SsvbFit *fit);

/**
 * # Safety
 * `s` must be null or a string returned by this library that has not been
 * freed.
 */
void ssvb_string_free(char *s);

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ssvb_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SSVB_H */
