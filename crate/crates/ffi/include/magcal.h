#ifndef MAGCAL_H
#define MAGCAL_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define MAGCAL_METHOD_BFG 0

#define MAGCAL_METHOD_IFG 1

#define MAGCAL_METHOD_ELLIPSOID 2

#define MAGCAL_AGGREGATOR_MEDIAN 0

#define MAGCAL_AGGREGATOR_MEAN 1

typedef enum MagcalStatus {
  MAGCAL_STATUS_OK = 0,
  MAGCAL_STATUS_NULL_POINTER = 1,
  MAGCAL_STATUS_INVALID_ARGUMENT = 2,
  MAGCAL_STATUS_INSUFFICIENT_DATA = 3,
  MAGCAL_STATUS_NOT_POSITIVE_DEFINITE = 4,
  MAGCAL_STATUS_NUMERICAL_FAILURE = 5,
  MAGCAL_STATUS_PANIC = 6,
} MagcalStatus;

// Online calibration state.
typedef struct MagcalEstimator MagcalEstimator;

// One sensor sample: seconds, milligauss, rad/s.
typedef struct MagcalSample {
  double t;
  double mag[3];
  double gyro[3];
} MagcalSample;

// A calibration. Corrected field is `inverse_soft_iron * m - pseudo_hard_iron`.
typedef struct MagcalCalibration {
  // Row-major, unit determinant.
  double soft_iron[9];
  // Row-major inverse of `soft_iron`.
  double inverse_soft_iron[9];
  double hard_iron[3];
  double pseudo_hard_iron[3];
  // Zero when `has_gyro_bias` is false.
  double gyro_bias[3];
  bool has_gyro_bias;
  bool converged;
  uint64_t iterations;
  double cost;
} MagcalCalibration;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *magcal_version(void);

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call into the library on this
// thread.
const char *magcal_last_error_message(void);

// Calibrates `n` time-ordered samples. `theta` is the window length in
// samples, or 0 to use one second of data.
//
// # Safety
// `samples` must be valid for `n` reads and `out` for one write.
enum MagcalStatus magcal_calibrate(const struct MagcalSample *samples,
                                   size_t n,
                                   uint32_t method,
                                   size_t theta,
                                   uint32_t aggregator,
                                   struct MagcalCalibration *out);

// Corrects `n` field vectors (`3n` doubles) from `mag_in` into `mag_out`.
// The two buffers may be the same.
//
// # Safety
// `cal` must be valid; `mag_in` and `mag_out` must be valid for `3n` doubles.
enum MagcalStatus magcal_apply(const struct MagcalCalibration *cal,
                               const double *mag_in,
                               size_t n,
                               double *mag_out);

// Affine-invariant distance between two row-major SPD matrices.
//
// # Safety
// `a` and `b` must be valid for 9 reads, `out` for one write.
enum MagcalStatus magcal_geodesic_distance(const double *a, const double *b, double *out);

// Creates an online estimator that forms one window per `theta` pushed
// samples. Returns null on invalid arguments.
struct MagcalEstimator *magcal_estimator_new(size_t theta, uint32_t aggregator);

// Adds one sample; every `theta`-th sample triggers an estimator update.
//
// # Safety
// `est` must come from [`magcal_estimator_new`]; `sample` must be valid.
enum MagcalStatus magcal_estimator_push_sample(struct MagcalEstimator *est,
                                               const struct MagcalSample *sample);

// Number of windows consumed so far.
//
// # Safety
// `est` must be null or come from [`magcal_estimator_new`].
size_t magcal_estimator_window_count(const struct MagcalEstimator *est);

// Latest estimate. Fails with `InsufficientData` before the first window.
//
// # Safety
// `est` must come from [`magcal_estimator_new`]; `out` must be writable.
enum MagcalStatus magcal_estimator_current(const struct MagcalEstimator *est,
                                           struct MagcalCalibration *out);

// Mean of the last `tail_fraction` of the per-update estimates.
//
// # Safety
// `est` must come from [`magcal_estimator_new`]; `out` must be writable.
enum MagcalStatus magcal_estimator_final(const struct MagcalEstimator *est,
                                         double tail_fraction,
                                         struct MagcalCalibration *out);

// Releases an estimator. Null is ignored.
//
// # Safety
// `est` must be null or come from [`magcal_estimator_new`] and not have
// been freed.
void magcal_estimator_free(struct MagcalEstimator *est);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAGCAL_H */
