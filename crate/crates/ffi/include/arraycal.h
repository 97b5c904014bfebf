#ifndef ARRAYCAL_H
#define ARRAYCAL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  ARRAYCAL_STATUS_OK = 0,
  ARRAYCAL_STATUS_NULL_POINTER = 1,
  ARRAYCAL_STATUS_INVALID_UTF8 = 2,
  ARRAYCAL_STATUS_PARSE = 3,
  ARRAYCAL_STATUS_INVALID_CONFIG = 4,
  ARRAYCAL_STATUS_DIMENSION_MISMATCH = 5,
  ARRAYCAL_STATUS_DEGENERATE_GEOMETRY = 6,
  ARRAYCAL_STATUS_BUFFER_TOO_SMALL = 7,
  ARRAYCAL_STATUS_NOT_CONVERGED = 8,
  ARRAYCAL_STATUS_SINGULAR = 9,
  ARRAYCAL_STATUS_IO = 10,
  ARRAYCAL_STATUS_PANIC = 11,
} ArraycalStatus;

/**
 * A parsed scenario with its noise model.
 */
typedef struct ArraycalScenario ArraycalScenario;

/**
 * Sizes needed to allocate output buffers.
 */
typedef struct {
  size_t n_arrays;
  size_t n_steps;
  /**
   * Unknowns, `8(N−1) + 3K`.
   */
  size_t state_dim;
  /**
   * Stacked observation length, `4(N−1)K + 3(K−1)`.
   */
  size_t observation_dim;
} ArraycalDims;

/**
 * Summary of an observability check.
 */
typedef struct {
  bool observable;
  size_t rank_j;
  size_t state_dim;
  size_t rank_f;
  size_t rank_fbar_prime;
  size_t rank_tbar;
  bool necessary_ok;
  bool sufficient;
  /**
   * Number of degenerate configurations detected.
   */
  size_t n_degenerate;
} ArraycalVerdict;

/**
 * Outcome of a calibration run.
 */
typedef struct {
  size_t iterations;
  double final_cost;
  double gradient_norm;
  bool converged;
  size_t rank_j;
} ArraycalSolveInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread; empty after a successful call. The
 * pointer stays valid until the next call into this library on the same
 * thread.
 */
const char *arraycal_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *arraycal_version(void);

/**
 * Parse a scenario from TOML text. On success `*out` owns a new handle.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
ArraycalStatus arraycal_scenario_from_toml(const char *toml, ArraycalScenario **out);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `sc` must come from [`arraycal_scenario_from_toml`] and not be used
 * afterwards.
 */
void arraycal_scenario_free(ArraycalScenario *sc);

/**
 * # Safety
 * `sc` must be a live handle and `out` a valid pointer.
 */
ArraycalStatus arraycal_scenario_dims(const ArraycalScenario *sc, ArraycalDims *out);

/**
 * `rank(J_k)` and `g₂(k)` for each prefix `k = 1..K`; both buffers need
 * `K` entries. `rank_tol <= 0` selects the default relative threshold.
 *
 * # Safety
 * `sc` must be a live handle; `ranks` and `state_dims` must hold `len`
 * elements.
 */
ArraycalStatus arraycal_rank_trace(const ArraycalScenario *sc,
                                   double rank_tol,
                                   size_t *ranks,
                                   size_t *state_dims,
                                   size_t len);

/**
 * Rank analysis and sufficient-condition check of the full scenario.
 *
 * # Safety
 * `sc` must be a live handle and `out` a valid pointer.
 */
ArraycalStatus arraycal_check(const ArraycalScenario *sc, double rank_tol, ArraycalVerdict *out);

/**
 * Analytic Jacobian at the ground truth, `observation_dim × state_dim`,
 * row-major.
 *
 * # Safety
 * `sc` must be a live handle and `buf` must hold `len` doubles.
 */
ArraycalStatus arraycal_jacobian(const ArraycalScenario *sc, double *buf, size_t len);

/**
 * Stacked measurements `[y¹; sΔ¹; …; yᴷ]` drawn with `seed`, or the ideal
 * ones when `noise_free` is set.
 *
 * # Safety
 * `sc` must be a live handle and `buf` must hold `len` doubles.
 */
ArraycalStatus arraycal_synthesize(const ArraycalScenario *sc,
                                   uint64_t seed,
                                   bool noise_free,
                                   double *buf,
                                   size_t len);

/**
 * Ground-truth state vector.
 *
 * # Safety
 * `sc` must be a live handle and `buf` must hold `len` doubles.
 */
ArraycalStatus arraycal_ground_truth(const ArraycalScenario *sc, double *buf, size_t len);

/**
 * Calibrate from stacked measurements, starting at `init` (ground truth
 * when null). `estimate` receives the best iterate even when the status is
 * `NOT_CONVERGED` or `SINGULAR`; `info` may be null.
 *
 * # Safety
 * `sc` must be a live handle; `measurements` must hold `n_measurements`
 * doubles, `init` (if not null) and `estimate` `state_dim` doubles.
 */
ArraycalStatus arraycal_calibrate(const ArraycalScenario *sc,
                                  const double *measurements,
                                  size_t n_measurements,
                                  const double *init,
                                  double *estimate,
                                  size_t state_dim,
                                  ArraycalSolveInfo *info);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ARRAYCAL_H */
