#ifndef ABSTENTION_H
#define ABSTENTION_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum AbstStatus {
  ABST_STATUS_OK = 0,
  ABST_STATUS_NULL_POINTER = 1,
  ABST_STATUS_INVALID_ARGUMENT = 2,
  ABST_STATUS_DOMAIN = 3,
  /**
   * Separation, rank deficiency, non-convergence or a degenerate policy.
   */
  ABST_STATUS_NUMERICAL = 4,
  ABST_STATUS_IO = 5,
  ABST_STATUS_PARSE = 6,
  ABST_STATUS_INTERNAL = 7,
} AbstStatus;

/**
 * Temperature-scaling fit. Opaque to C.
 */
typedef struct AbstCalibration AbstCalibration;

/**
 * Mediation analysis result. Opaque to C.
 */
typedef struct AbstMediation AbstMediation;

/**
 * Policy quantities derived from a fitted decision model.
 */
typedef struct AbstDecisionParams {
  double t50;
  double policy_temperature;
  /**
   * NaN for Phase 2 models.
   */
  double scale;
  /**
   * NaN for Phase 2 models.
   */
  double shift;
  /**
   * NaN for Phase 2 models.
   */
  double difficulty_adjustment;
} AbstDecisionParams;

/**
 * Headline estimates: both indirect effects with 95% intervals, the total
 * and direct effects, and the proportions mediated.
 */
typedef struct AbstMediationSummary {
  double indirect1;
  double indirect1_low;
  double indirect1_high;
  double indirect2;
  double indirect2_low;
  double indirect2_high;
  double total_effect;
  double direct_effect;
  double proportion1;
  double proportion2;
} AbstMediationSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *abst_last_error(void);

/**
 * Frees a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void abst_string_free(char *s);

/**
 * Writes softmax(logits / tau) into `out`, which holds `n` values.
 *
 * # Safety
 * `logits` and `out` must each point to `n` values.
 */
enum AbstStatus abst_scaled_softmax(const double *logits, size_t n, double tau, double *out);

/**
 * Expected calibration error over `n_bins` equal-width bins. `correct`
 * holds 0 or 1 per prediction.
 *
 * # Safety
 * `confidences` and `correct` must each point to `n` values.
 */
enum AbstStatus abst_ece(const double *confidences,
                         const uint8_t *correct,
                         size_t n,
                         size_t n_bins,
                         double *out);

/**
 * Area under the ROC curve of confidence against correctness.
 *
 * # Safety
 * `confidences` and `correct` must each point to `n` values.
 */
enum AbstStatus abst_auroc(const double *confidences,
                           const uint8_t *correct,
                           size_t n,
                           double *out);

/**
 * Wilson score interval for `k` successes in `n` trials.
 *
 * # Safety
 * `low` and `high` must be valid for writing.
 */
enum AbstStatus abst_wilson_ci(uint64_t k, uint64_t n, double z, double *low, double *high);

/**
 * Phase 2 logit `b0 + bc * C + bd * D`, evaluated at difficulty `diff_at`.
 *
 * # Safety
 * `out` must be valid for writing.
 */
enum AbstStatus abst_derive_phase2(double b0,
                                   double b_confidence,
                                   double b_difficulty,
                                   double diff_at,
                                   struct AbstDecisionParams *out);

/**
 * Phase 4 logit `b0 + bt * T + bc * C + bd * D`, confidence in percent.
 *
 * # Safety
 * `out` must be valid for writing.
 */
enum AbstStatus abst_derive_phase4(double b0,
                                   double b_threshold,
                                   double b_confidence,
                                   double b_difficulty,
                                   struct AbstDecisionParams *out);

/**
 * Fits the scaling temperature. `logits` is row-major, `n_items` rows of
 * `n_options`; `correct` holds zero-based option indices.
 *
 * # Safety
 * `logits` must hold `n_items * n_options` values, `correct` `n_items`
 * values, and `out` must be valid for writing.
 */
enum AbstStatus abst_calibration_fit(const double *logits,
                                     size_t n_items,
                                     size_t n_options,
                                     const uint32_t *correct,
                                     size_t n_bins,
                                     struct AbstCalibration **out);

/**
 * Fitted temperature, or NaN for a null handle.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
double abst_calibration_tau(const struct AbstCalibration *h);

/**
 * ECE before and after scaling.
 *
 * # Safety
 * `h` must be null or a live handle; the outputs must be writable.
 */
enum AbstStatus abst_calibration_ece(const struct AbstCalibration *h,
                                     double *before,
                                     double *after);

/**
 * AUROC at the fitted temperature. Fails with `Domain` when every
 * prediction is correct, or none is.
 *
 * # Safety
 * `h` must be null or a live handle; `out` must be writable.
 */
enum AbstStatus abst_calibration_auroc(const struct AbstCalibration *h, double *out);

/**
 * # Safety
 * `h` must be null or a handle not yet freed.
 */
void abst_calibration_free(struct AbstCalibration *h);

/**
 * Runs the mediation analysis on a paired-records JSONL file with `b`
 * bootstrap replicates.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum AbstStatus abst_mediation_run(const char *path,
                                   bool with_difficulty,
                                   size_t b,
                                   uint64_t seed,
                                   struct AbstMediation **out);

/**
 * # Safety
 * `h` must be null or a live handle; `out` must be writable.
 */
enum AbstStatus abst_mediation_summary(const struct AbstMediation *h,
                                       struct AbstMediationSummary *out);

/**
 * Full report as JSON. Free the string with [`abst_string_free`].
 *
 * # Safety
 * `h` must be null or a live handle; `out` must be writable.
 */
enum AbstStatus abst_mediation_to_json(const struct AbstMediation *h, char **out);

/**
 * # Safety
 * `h` must be null or a handle not yet freed.
 */
void abst_mediation_free(struct AbstMediation *h);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ABSTENTION_H */
