#ifndef NEEDLEMETRICS_H
#define NEEDLEMETRICS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NmCondition {
  NM_CONDITION_TELEOPERATED = 0,
  NM_CONDITION_OPEN = 1,
} NmCondition;

typedef enum NmStatus {
  NM_STATUS_OK = 0,
  NM_STATUS_NULL_POINTER = 1,
  NM_STATUS_INVALID_ARGUMENT = 2,
  NM_STATUS_IO = 3,
  NM_STATUS_PARSE = 4,
  NM_STATUS_NUMERICAL = 5,
  NM_STATUS_SEGMENTATION_FAILED = 6,
  NM_STATUS_UNDEFINED_METRIC = 7,
  NM_STATUS_PANIC = 8,
} NmStatus;

// Opaque fitted tracker calibration.
typedef struct NmCalibration NmCalibration;

// Opaque preprocessed trial.
typedef struct NmTrial NmTrial;

typedef struct NmBoundaries {
  size_t j1;
  size_t j2;
  double j1_time_s;
  double j2_time_s;
} NmBoundaries;

// Metrics of one segment; `a` is NaN when the path length is zero.
typedef struct NmSegmentMetrics {
  double tt;
  double p;
  double a;
  double c;
} NmSegmentMetrics;

typedef struct NmEffect {
  double f;
  double p;
  uint32_t df_num;
  uint32_t df_den;
} NmEffect;

typedef struct NmAnova {
  struct NmEffect expertise;
  struct NmEffect trial;
  struct NmEffect interaction;
  // Experienced minus novice, averaged over windows.
  double exp_minus_nov;
  // Late minus early, averaged over groups.
  double late_minus_early;
} NmAnova;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next call into the library from this thread.
const char *nm_last_error(void);

// Library version as a static NUL-terminated string.
const char *nm_version(void);

// Nearest rotation to a row-major 3×3 matrix, as a canonical unit
// quaternion `[w, x, y, z]`.
//
// # Safety
// `matrix` must point to 9 doubles and `out_q` to 4.
enum NmStatus nm_orthogonalize(const double *matrix, double *out_q);

// Angle in radians of the rotation taking `a` to `b`.
//
// # Safety
// `a` and `b` must point to 4 doubles; `out_angle` must be valid.
enum NmStatus nm_rotation_angle(const double *a, const double *b, double *out_angle);

// Spherical interpolation between `a` (u = 0) and `b` (u = 1).
//
// # Safety
// `a`, `b` and `out_q` must point to 4 doubles.
enum NmStatus nm_slerp(const double *a, const double *b, double u, double *out_q);

// Zero-phase 2nd-order Butterworth low-pass of `n` uniformly sampled values.
//
// # Safety
// `values` and `out_values` must each point to `n` doubles; they may alias.
enum NmStatus nm_filtfilt(const double *values,
                          size_t n,
                          double rate,
                          double cutoff,
                          double *out_values);

// Fits tracker lever arms from a calibration recording CSV.
//
// # Safety
// `recording_path` must be a NUL-terminated string; `out` must be valid.
enum NmStatus nm_calibration_fit(const char *recording_path, struct NmCalibration **out_cal);

// # Safety
// `cal` must come from [`nm_calibration_fit`] and not be used afterwards.
void nm_calibration_free(struct NmCalibration *cal);

// Loads and preprocesses a recording onto the default 100 Hz grid.
// Open recordings need a calibration; it is ignored for teleoperated ones.
//
// # Safety
// `recording_path` must be a NUL-terminated string; `cal` may be NULL;
// `out_trial` must be valid.
enum NmStatus nm_trial_load(const char *recording_path,
                            enum NmCondition condition,
                            const struct NmCalibration *cal,
                            struct NmTrial **out_trial);

// # Safety
// `trial` must come from [`nm_trial_load`] and not be used afterwards.
void nm_trial_free(struct NmTrial *trial);

// Number of preprocessed samples.
//
// # Safety
// `trial` must be a live handle and `out_len` valid.
enum NmStatus nm_trial_len(const struct NmTrial *trial, size_t *out_len);

// Automatic segment boundaries with default parameters.
//
// # Safety
// `trial` must be a live handle and `out_b` valid.
enum NmStatus nm_trial_segment(const struct NmTrial *trial, struct NmBoundaries *out_b);

// Metrics of segments I and II for boundaries `j1 < j2` (sample indices).
//
// # Safety
// `trial` must be a live handle and `out_metrics` must point to 2 structs.
enum NmStatus nm_trial_metrics(const struct NmTrial *trial,
                               size_t j1,
                               size_t j2,
                               struct NmSegmentMetrics *out_metrics);

// 2×2 mixed ANOVA on `n` participants' early and late window means;
// `experienced[i]` is nonzero for experienced participants.
//
// # Safety
// `early`, `late` and `experienced` must each point to `n` elements;
// `out_anova` must be valid.
enum NmStatus nm_mixed_anova(const double *early,
                             const double *late,
                             const uint8_t *experienced,
                             size_t n,
                             double alpha,
                             struct NmAnova *out_anova);

// Percentile bootstrap interval of the mean.
//
// # Safety
// `values` must point to `n` doubles; `out_lo` and `out_hi` must be valid.
enum NmStatus nm_bootstrap_ci(const double *values,
                              size_t n,
                              double level,
                              size_t replicates,
                              uint64_t seed,
                              double *out_lo,
                              double *out_hi);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEEDLEMETRICS_H */
