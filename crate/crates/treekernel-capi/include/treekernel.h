#ifndef TREEKERNEL_H
#define TREEKERNEL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Kernel selector for gram evaluation.
 */
typedef enum TkKernel {
  TkK0 = 0,
  TkKp = 1,
} TkKernel;

/**
 * Status codes returned by every fallible function.
 */
typedef enum TkStatus {
  TkOk = 0,
  TkInvalidArgument = 1,
  TkRuntimeError = 2,
  TkPanic = 3,
} TkStatus;

/**
 * Split selection strategies, mirroring the library enum.
 */
typedef enum TkStrategy {
  TkUniform = 0,
  TkExtraTrees = 1,
  TkSoftmax = 2,
  TkBreimanGreedy = 3,
} TkStrategy;

/**
 * Opaque forest handle; free with `tk_forest_free`.
 */
typedef struct TkForest TkForest;

/**
 * Forest growth parameters. Zero-initialise and set what you need;
 * `tk_config_default` fills in the library defaults for a strategy.
 */
typedef struct TkConfig {
  enum TkStrategy strategy;
  uintptr_t max_depth;
  uintptr_t k_candidates;
  double beta;
  uintptr_t max_features;
  uintptr_t min_samples_leaf;
  double min_impurity_decrease;
  bool bootstrap_for_partition;
  uint64_t seed;
  uintptr_t m_trees;
} TkConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Pointer to the last error message for this thread. Valid until the next
 * failing call on the same thread; do not free.
 */
const char *tk_last_error(void);

/**
 * Fill `config` with the library defaults for `strategy` on `p` features.
 *
 * # Safety
 * `config` must be a valid writable pointer.
 */
enum TkStatus tk_config_default(enum TkStrategy strategy, uintptr_t p, struct TkConfig *config);

/**
 * Grow a forest on row-major features `x` (n rows, p columns, values in
 * [0,1]) with targets `y`. On success `*out` owns the forest.
 *
 * # Safety
 * `x` must point to `n * p` doubles, `y` to `n` doubles, `config` and
 * `out` must be valid pointers.
 */
enum TkStatus tk_forest_fit(const double *x,
                            const double *y,
                            uintptr_t n,
                            uintptr_t p,
                            const struct TkConfig *config,
                            struct TkForest **out);

/**
 * Number of trees in the forest.
 *
 * # Safety
 * `handle` must come from `tk_forest_fit` or `tk_forest_load`.
 */
uintptr_t tk_forest_num_trees(const struct TkForest *handle);

/**
 * Predict at `n` query points (row-major, p columns), writing into `out`.
 *
 * # Safety
 * `handle` must be a live forest handle, `x` must hold `n * p` doubles,
 * `out` must hold `n` doubles.
 */
enum TkStatus tk_forest_predict(const struct TkForest *handle,
                                const double *x,
                                uintptr_t n,
                                uintptr_t p,
                                double *out);

/**
 * Cross-Gram matrix between `a` (na x p) and `b` (nb x p), written
 * row-major into `out` (na x nb). `n_train` scales the weighted kernel;
 * pass the training sample size the forest was fit on.
 *
 * # Safety
 * All pointers must be valid for the stated extents.
 */
enum TkStatus tk_forest_gram(const struct TkForest *handle,
                             enum TkKernel kernel,
                             const double *a,
                             uintptr_t na,
                             const double *b,
                             uintptr_t nb,
                             uintptr_t p,
                             uintptr_t n_train,
                             double *out);

/**
 * Serialize the forest to `path`.
 *
 * # Safety
 * `handle` must be live, `path` a NUL-terminated string.
 */
enum TkStatus tk_forest_save(const struct TkForest *handle, const char *path);

/**
 * Load a forest previously written by `tk_forest_save`.
 *
 * # Safety
 * `path` must be NUL-terminated, `out` a valid writable pointer.
 */
enum TkStatus tk_forest_load(const char *path, struct TkForest **out);

/**
 * Release a forest handle. Null is a no-op.
 *
 * # Safety
 * `handle` must come from this library and not be freed twice.
 */
void tk_forest_free(struct TkForest *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TREEKERNEL_H */
