#ifndef REP_HOLONOMY_H
#define REP_HOLONOMY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define HOL_GROUP_SO 0

#define HOL_GROUP_O 1

#define HOL_WHITEN_ZCA 0

#define HOL_WHITEN_ZSCORE 1

#define HOL_WHITEN_LOCAL 2

#define HOL_NEIGHBORS_SHARED 0

#define HOL_NEIGHBORS_SEPARATE 1

#define HOL_CENTERING_MIDPOINT_SHARED 0

#define HOL_CENTERING_ENDPOINT_PAIR 1

#define HOL_CENTERING_ROW_TRANSPORT 2

/**
 * Status codes returned by every fallible function.
 */
typedef enum HolStatus {
  HOL_STATUS_OK = 0,
  HOL_STATUS_NULL_POINTER = 1,
  HOL_STATUS_DIMENSION_MISMATCH = 2,
  HOL_STATUS_INVALID_ARGUMENT = 3,
  HOL_STATUS_NUMERICAL = 4,
  HOL_STATUS_LOOP_NOT_CLOSED = 5,
  HOL_STATUS_MISSING_POOL_INPUTS = 6,
  HOL_STATUS_IO = 7,
  HOL_STATUS_FORMAT = 8,
  HOL_STATUS_CALLBACK = 9,
  HOL_STATUS_PANIC = 10,
} HolStatus;

/**
 * Opaque feature pool.
 */
typedef struct HolPool HolPool;

/**
 * Opaque estimate.
 */
typedef struct HolResult HolResult;

/**
 * Estimator settings; obtain defaults with [`hol_default_config`].
 */
typedef struct HolConfig {
  size_t k;
  size_t q;
  /**
   * `HOL_GROUP_*`.
   */
  uint32_t group;
  /**
   * `HOL_WHITEN_*`.
   */
  uint32_t whitening;
  /**
   * `HOL_NEIGHBORS_*`.
   */
  uint32_t neighbor_mode;
  /**
   * `HOL_CENTERING_*`.
   */
  uint32_t centering;
  double eigen_floor;
} HolConfig;

/**
 * Feature callback: write `p` features of the `d`-dimensional input `x`
 * into `out` and return 0, or nonzero on failure. It is only ever called
 * from the thread that called into the library.
 */
typedef int32_t (*HolFeatureFn)(void *user_data, const double *x, size_t d, double *out, size_t p);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *hol_version(void);

/**
 * Message of the last failed call on this thread (empty after success).
 * Valid until the next library call on the same thread.
 */
const char *hol_last_error(void);

/**
 * Fill `out` with the default settings (k = 128, q = 64, SO, ZCA, shared
 * neighbors, row-transport clouds).
 *
 * # Safety
 * `out` must be a valid pointer to a `HolConfig`.
 */
enum HolStatus hol_default_config(struct HolConfig *out);

/**
 * Build a pool from `n × p` row-major raw features.
 *
 * # Safety
 * `data` must point to `n * p` doubles; `out` must be writable.
 */
enum HolStatus hol_pool_new(const double *data, size_t n, size_t p, struct HolPool **out);

/**
 * Read an HPOOL1 file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum HolStatus hol_pool_read(const char *path, struct HolPool **out);

/**
 * Attach the `n × d` inputs that produced the pool rows (needed for
 * row-transport clouds).
 *
 * # Safety
 * `pool` must come from this library; `inputs` must hold `n * d` doubles.
 */
enum HolStatus hol_pool_set_inputs(struct HolPool *pool, const double *inputs, size_t n, size_t d);

/**
 * Pool size and feature dimension.
 *
 * # Safety
 * `pool` must come from this library; `n` and `p` must be writable.
 */
enum HolStatus hol_pool_shape(const struct HolPool *pool, size_t *n, size_t *p);

/**
 * # Safety
 * `pool` must come from this library (or be null) and not be used again.
 */
void hol_pool_free(struct HolPool *pool);

/**
 * Estimate from precomputed raw loop features: `rows = L + 1` rows of
 * dimension `p`, with the last row equal to the first. Requires
 * midpoint-shared or endpoint-pair centering.
 *
 * # Safety
 * `pool` and `config` must be valid; `features` must hold `rows * p`
 * doubles; `out` must be writable.
 */
enum HolStatus hol_estimate_features(const struct HolPool *pool,
                                     const struct HolConfig *config,
                                     const double *features,
                                     size_t rows,
                                     size_t p,
                                     struct HolResult **out);

/**
 * Estimate along an input-space loop (`n_points = L + 1` rows of dimension
 * `d`, last equal to first) with features supplied by `callback`.
 *
 * # Safety
 * `pool` and `config` must be valid; `points` must hold `n_points * d`
 * doubles; `callback` must satisfy the [`HolFeatureFn`] contract.
 */
enum HolStatus hol_estimate_callback(const struct HolPool *pool,
                                     const struct HolConfig *config,
                                     HolFeatureFn callback,
                                     void *user_data,
                                     const double *points,
                                     size_t n_points,
                                     size_t d,
                                     struct HolResult **out);

/**
 * # Safety
 * `result` must come from this library; `out` must be writable.
 */
enum HolStatus hol_result_h_norm(const struct HolResult *result, double *out);

/**
 * Feature dimension `p` of the holonomy matrix.
 *
 * # Safety
 * `result` must come from this library; `out` must be writable.
 */
enum HolStatus hol_result_dim(const struct HolResult *result, size_t *out);

/**
 * Number of loop edges.
 *
 * # Safety
 * `result` must come from this library; `out` must be writable.
 */
enum HolStatus hol_result_n_edges(const struct HolResult *result, size_t *out);

/**
 * Copy `H` row-major into `out` (`len` must be at least `p * p`).
 *
 * # Safety
 * `result` must come from this library; `out` must hold `len` doubles.
 */
enum HolStatus hol_result_matrix(const struct HolResult *result, double *out, size_t len);

/**
 * Copy the `p` eigen-angles (sorted by magnitude, descending) into `out`.
 *
 * # Safety
 * `result` must come from this library; `out` must hold `len` doubles.
 */
enum HolStatus hol_result_eigen_angles(const struct HolResult *result, double *out, size_t len);

/**
 * # Safety
 * `result` must come from this library (or be null) and not be used again.
 */
void hol_result_free(struct HolResult *result);

/**
 * `‖H − I‖_F / (2√p)` of a row-major `p × p` matrix.
 *
 * # Safety
 * `h` must hold `p * p` doubles; `out` must be writable.
 */
enum HolStatus hol_h_norm(const double *h, size_t p, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REP_HOLONOMY_H */
