#ifndef PMFORMER_H
#define PMFORMER_H

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PmStatus {
  PM_STATUS_OK = 0,
  PM_STATUS_NULL_POINTER = 1,
  /**
   * Bad argument or configuration.
   */
  PM_STATUS_USAGE = 2,
  /**
   * Malformed, missing or insufficient data.
   */
  PM_STATUS_DATA = 3,
  /**
   * Singular fit, divergence or an undefined statistic.
   */
  PM_STATUS_NUMERIC = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  PM_STATUS_INTERNAL = 5,
} PmStatus;

/**
 * A feature matrix (rows x channels, row-major).
 */
typedef struct PmFeatures PmFeatures;

/**
 * A trained PMformer or DLinear model loaded from a checkpoint.
 */
typedef struct PmModel PmModel;

/**
 * Backtest metrics; percentages are in percent units and `sharpe` is NaN
 * when undefined.
 */
typedef struct PmBacktestReport {
  double mse;
  double rmse;
  double mae;
  double total_roi_pct;
  double sharpe;
  double max_drawdown_pct;
  double directional_accuracy_pct;
  size_t n_days;
  size_t n_trades;
} PmBacktestReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *pm_last_error(void);

/**
 * Static, NUL-terminated library version.
 */
const char *pm_version(void);

/**
 * Loads a feature CSV, or builds the 16-channel matrix from a klines CSV.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PmStatus pm_features_load(const char *path, struct PmFeatures **out);

/**
 * # Safety
 * `features` must come from [`pm_features_load`] (or be null) and is
 * invalid afterwards.
 */
void pm_features_free(struct PmFeatures *features);

/**
 * # Safety
 * `features` must be a live handle or null.
 */
size_t pm_features_rows(const struct PmFeatures *features);

/**
 * # Safety
 * `features` must be a live handle or null.
 */
size_t pm_features_cols(const struct PmFeatures *features);

/**
 * Copies the row-major values into `buf`, which must hold rows * cols values.
 *
 * # Safety
 * `features` must be a live handle and `buf` valid for `len` writes.
 */
enum PmStatus pm_features_copy(const struct PmFeatures *features, double *buf, size_t len);

/**
 * Loads a PMformer or DLinear checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PmStatus pm_model_load(const char *path, struct PmModel **out);

/**
 * # Safety
 * `model` must come from [`pm_model_load`] (or be null) and is invalid
 * afterwards.
 */
void pm_model_free(struct PmModel *model);

/**
 * Input window length `SL`, or 0 for a null handle.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t pm_model_window(const struct PmModel *model);

/**
 * Number of input channels, or 0 for a null handle.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t pm_model_channels(const struct PmModel *model);

/**
 * Scaled next-step target prediction for one scaled `SL x channels`
 * row-major window. PMformer averages `ensemble` target subsets drawn from
 * `seed`; DLinear ignores both.
 *
 * # Safety
 * `model` must be a live handle, `window` valid for `len` reads and `out`
 * a valid pointer.
 */
enum PmStatus pm_model_predict(const struct PmModel *model,
                               const double *window,
                               size_t len,
                               size_t ensemble,
                               uint64_t seed,
                               double *out);

/**
 * Sign-rule backtest of `n` predicted against actual log returns.
 *
 * # Safety
 * `preds` and `actuals` must be valid for `n` reads and `out` a valid pointer.
 */
enum PmStatus pm_backtest(const double *preds,
                          const double *actuals,
                          size_t n,
                          double cost_per_side,
                          struct PmBacktestReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PMFORMER_H */
