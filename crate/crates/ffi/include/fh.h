/* C interface for the fh covariance-tracking and guidance library. */

#pragma once

/* Generated with cbindgen:0.27.0 */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Jacobian factor selection for reconstruction guidance.
 */
typedef enum FhJacobian {
  FH_JACOBIAN_IDENTITY = 0,
  FH_JACOBIAN_COVARIANCE_APPROX = 1,
  FH_JACOBIAN_EXACT_COVARIANCE = 2,
} FhJacobian;

/**
 * Mean-transfer mode for the tracker.
 */
typedef enum FhMeanTransfer {
  FH_MEAN_TRANSFER_TIME_UPDATE = 0,
  FH_MEAN_TRANSFER_EXACT_EVALUATION = 1,
} FhMeanTransfer;

/**
 * Outcome of one tracker update, mirrored as plain integers.
 */
typedef enum FhSpaceUpdate {
  FH_SPACE_UPDATE_APPLIED = 0,
  FH_SPACE_UPDATE_SKIPPED_CURVATURE = 1,
  FH_SPACE_UPDATE_SKIPPED_RANGE = 2,
  FH_SPACE_UPDATE_FIRST_CALL = 3,
} FhSpaceUpdate;

/**
 * Status code returned by every FFI entry point.
 */
typedef enum FhStatus {
  FH_STATUS_OK = 0,
  FH_STATUS_NULL_POINTER = 1,
  FH_STATUS_INVALID_ARGUMENT = 2,
  FH_STATUS_NUMERICAL_FAILURE = 3,
  FH_STATUS_CAPACITY_EXCEEDED = 4,
  FH_STATUS_UNSUPPORTED = 5,
  FH_STATUS_INTERNAL_PANIC = 6,
} FhStatus;

/**
 * Gaussian mixture handle.
 */
typedef struct FhMixture FhMixture;

/**
 * Covariance tracker handle.
 */
typedef struct FhTracker FhTracker;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message into `buffer` (truncating) and returns the
 * full message length in bytes, excluding the terminator.
 */
uintptr_t fh_last_error_message(char *buffer, uintptr_t length);

/**
 * Library version as a static C string.
 */
const char *fh_version(void);

/**
 * Builds a mixture from row-major arrays: `weights` has `n_components`
 * entries, `means` is `n_components x dim`, `covariances` is
 * `n_components x dim x dim`.
 */
enum FhStatus fh_mixture_new(uintptr_t dim,
                             uintptr_t n_components,
                             const double *weights,
                             const double *means,
                             const double *covariances,
                             struct FhMixture **out);

void fh_mixture_free(struct FhMixture *mixture);

/**
 * Score of the sigma-smoothed mixture at `x` (length `dim`).
 */
enum FhStatus fh_mixture_score(const struct FhMixture *mixture,
                               const double *x,
                               double sigma,
                               double *out_score);

/**
 * Exact denoiser mean and (optionally) covariance at `(x, sigma)`;
 * `out_covariance` may be null, otherwise it receives `dim x dim` row-major
 * entries.
 */
enum FhStatus fh_mixture_denoiser_moments(const struct FhMixture *mixture,
                                          const double *x,
                                          double sigma,
                                          double *out_mean,
                                          double *out_covariance);

/**
 * Draws `n_samples` mixture samples into `out` (`n_samples x dim`,
 * row-major), deterministically in `seed`.
 */
enum FhStatus fh_mixture_sample(const struct FhMixture *mixture,
                                uint64_t seed,
                                uintptr_t n_samples,
                                double *out);

/**
 * Tracker with a scaled-identity initial covariance declared at
 * `init_sigma`. Space updates apply inside `[space_lo, space_hi]`.
 */
enum FhStatus fh_tracker_new_identity(uintptr_t dim,
                                      double scale,
                                      double init_sigma,
                                      double space_lo,
                                      double space_hi,
                                      double curvature_tolerance,
                                      enum FhMeanTransfer mean_transfer,
                                      struct FhTracker **out);

/**
 * Tracker initialized at the empirical covariance of `samples`
 * (`n_samples x dim`, row-major).
 */
enum FhStatus fh_tracker_new_data_covariance(uintptr_t dim,
                                             const double *samples,
                                             uintptr_t n_samples,
                                             double init_sigma,
                                             double space_lo,
                                             double space_hi,
                                             double curvature_tolerance,
                                             enum FhMeanTransfer mean_transfer,
                                             struct FhTracker **out);

void fh_tracker_free(struct FhTracker *tracker);

/**
 * Feeds one denoiser evaluation through the tracker.
 * `exact_transferred_mean` is required in exact-evaluation transfer mode
 * once a previous call exists, and is ignored otherwise (may be null).
 */
enum FhStatus fh_tracker_process_denoiser(struct FhTracker *tracker,
                                          const double *denoiser_mean,
                                          const double *location,
                                          double sigma,
                                          const double *exact_transferred_mean,
                                          enum FhSpaceUpdate *out_outcome);

/**
 * Densifies the tracker's current covariance estimate (signal coordinates)
 * into `out` (`dim x dim`, row-major).
 */
enum FhStatus fh_tracker_covariance(const struct FhTracker *tracker, double *out);

/**
 * Reconstruction guidance for a linear-Gaussian observation with a dense
 * (or identity, when `operator` is null) measurement matrix.
 *
 * `covariance` is the moment covariance (dense `dim x dim`), `operator` is
 * `y_len x dim` row-major. The Jacobian factor uses the same covariance in
 * `ExactCovariance` mode.
 */
enum FhStatus fh_guidance_reconstruction(uintptr_t dim,
                                         const double *denoiser_mean,
                                         const double *covariance,
                                         double sigma,
                                         const double *operator_,
                                         const double *y,
                                         uintptr_t y_len,
                                         double sigma_y,
                                         enum FhJacobian jacobian,
                                         double fallback_threshold,
                                         double cg_rtol,
                                         uintptr_t cg_max_iterations,
                                         double *out_gradient);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
