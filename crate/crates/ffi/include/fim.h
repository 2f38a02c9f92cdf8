#ifndef FIM_H
#define FIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum FimStatus {
  FIM_OK = 0,
  FIM_INVALID_INPUT = 1,
  FIM_INFEASIBLE = 2,
  FIM_NUMERICAL = 3,
  FIM_NULL_POINTER = 4,
  FIM_PANIC = 5,
  FIM_IO = 6,
} FimStatus;

/**
 * Optimization modes for [`fim_solve_single_path`].
 */
typedef enum FimMode {
  FIM_MODE_PBF_ONLY = 0,
  FIM_MODE_EM_ONLY = 1,
  FIM_MODE_EM_PBF = 2,
} FimMode;

/**
 * Recovery algorithms for [`fim_recover`].
 */
typedef enum FimAlgorithm {
  FIM_ALG_OMP = 0,
  FIM_ALG_FISTA = 1,
  FIM_ALG_VSBL = 2,
  FIM_ALG_MFVSBL = 3,
  FIM_ALG_CMFVSBL = 4,
} FimAlgorithm;

/**
 * Opaque channel realization.
 */
typedef struct FimChannel FimChannel;

/**
 * Opaque sparse recovery problem.
 */
typedef struct FimProblem FimProblem;

/**
 * Opaque recovery result.
 */
typedef struct FimRecovery FimRecovery;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fim_version(void);

/**
 * Message of the last failed call on this thread ("" after a success).
 * Valid until the next `fim_*` call on the same thread.
 */
const char *fim_last_error_message(void);

/**
 * One cascaded path with gain `g`, virtual angles `(theta, phi)` and
 * direct gain `gamma`.
 *
 * # Safety
 * `out_channel` must be a valid pointer.
 */
enum FimStatus fim_channel_single_path(double gain_re,
                                       double gain_im,
                                       double theta,
                                       double phi,
                                       double direct_re,
                                       double direct_im,
                                       struct FimChannel **out_channel);

/**
 * Random channel with `L` BS paths, `P` user paths and the given gain
 * standard deviations, drawn from `seed`.
 *
 * # Safety
 * `out_channel` must be a valid pointer.
 */
enum FimStatus fim_channel_sample(size_t bs_paths,
                                  size_t user_paths,
                                  double sigma_alpha,
                                  double sigma_beta,
                                  double sigma_gamma,
                                  uint64_t seed,
                                  struct FimChannel **out_channel);

/**
 * Number of cascaded paths.
 *
 * # Safety
 * Both pointers must be valid.
 */
enum FimStatus fim_channel_num_paths(const struct FimChannel *channel, size_t *out_paths);

/**
 * # Safety
 * `channel` must come from a `fim_channel_*` constructor (or be null).
 */
void fim_channel_free(struct FimChannel *channel);

/**
 * Received power `|h_cas + gamma|^2` for `n` elements at `(x, z)` with
 * phases `v`.
 *
 * # Safety
 * `x`, `z`, `v` must point to `n` doubles; other pointers must be valid.
 */
enum FimStatus fim_received_power(const struct FimChannel *channel,
                                  const double *x,
                                  const double *z,
                                  const double *v,
                                  size_t n,
                                  double wavelength,
                                  double *out_power);

/**
 * PBF-only optimum `(|gamma| + N |sum g|)^2` and upper bound
 * `(|gamma| + N sum |g|)^2` for `n` elements.
 *
 * # Safety
 * All pointers must be valid.
 */
enum FimStatus fim_power_bounds(const struct FimChannel *channel,
                                size_t n,
                                double *out_pbf,
                                double *out_upper);

/**
 * Closed-form expectations of the PBF-only optimum and of the upper bound.
 *
 * # Safety
 * Output pointers must be valid.
 */
enum FimStatus fim_expected_bounds(size_t bs_paths,
                                   size_t user_paths,
                                   size_t n,
                                   double sigma_alpha,
                                   double sigma_beta,
                                   double sigma_gamma,
                                   double *out_pbf,
                                   double *out_upper);

/**
 * Closed-form optimum of a single-path channel with `n` elements inside
 * `[-region, region]^2`. Writes positions and phases (`n` each) and the
 * objective.
 *
 * # Safety
 * `out_x`, `out_z`, `out_v` must hold `n` doubles; other pointers must be valid.
 */
enum FimStatus fim_solve_single_path(const struct FimChannel *channel,
                                     size_t n,
                                     double wavelength,
                                     double region,
                                     double d_min,
                                     enum FimMode mode,
                                     double *out_x,
                                     double *out_z,
                                     double *out_v,
                                     double *out_objective);

/**
 * Loads a problem from its binary encoding.
 *
 * # Safety
 * `bytes` must point to `len` bytes; `out_problem` must be valid.
 */
enum FimStatus fim_problem_from_bytes(const uint8_t *bytes,
                                      size_t len,
                                      struct FimProblem **out_problem);

/**
 * Loads a problem file written by `SparseProblem::write_to`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_problem` must be valid.
 */
enum FimStatus fim_problem_read(const char *path, struct FimProblem **out_problem);

/**
 * Dictionary size: `rows` measurements by `atoms` columns.
 *
 * # Safety
 * All pointers must be valid.
 */
enum FimStatus fim_problem_dims(const struct FimProblem *problem,
                                size_t *out_rows,
                                size_t *out_atoms);

/**
 * # Safety
 * `problem` must come from a `fim_problem_*` constructor (or be null).
 */
void fim_problem_free(struct FimProblem *problem);

/**
 * Runs one recovery algorithm with default settings. `sparsity` is the OMP
 * iteration count (ignored by the other algorithms); `seed` drives the
 * clustering of CMFV-SBL.
 *
 * # Safety
 * All pointers must be valid.
 */
enum FimStatus fim_recover(const struct FimProblem *problem,
                           enum FimAlgorithm algorithm,
                           size_t sparsity,
                           uint64_t seed,
                           struct FimRecovery **out_recovery);

/**
 * Copies the coefficient estimate into `re`/`im` (`len` must equal the
 * number of atoms).
 *
 * # Safety
 * `re` and `im` must hold `len` doubles.
 */
enum FimStatus fim_recovery_coefficients(const struct FimRecovery *recovery,
                                         double *re,
                                         double *im,
                                         size_t len);

/**
 * Direct-channel estimate, iteration count and convergence flag.
 *
 * # Safety
 * All pointers must be valid.
 */
enum FimStatus fim_recovery_summary(const struct FimRecovery *recovery,
                                    double *out_direct_re,
                                    double *out_direct_im,
                                    size_t *out_iterations,
                                    bool *out_converged);

/**
 * # Safety
 * `recovery` must come from [`fim_recover`] (or be null).
 */
void fim_recovery_free(struct FimRecovery *recovery);

/**
 * Runs the experiment described by a JSON config and returns its main
 * artifact (CSV or JSON text). Free the string with [`fim_string_free`].
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out_text` must be valid.
 */
enum FimStatus fim_run_experiment(const char *config_json, char **out_text);

/**
 * # Safety
 * `s` must come from a `fim_*` call that documents this release (or be null).
 */
void fim_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FIM_H */
