#ifndef SEMRATE_H
#define SEMRATE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Norm of the perturbation ball, passed to [`semrate_robustness`] as an
 * integer so that out-of-range values are rejected instead of undefined.
 */
typedef enum {
  SEMRATE_NORM_L_INF = 0,
  SEMRATE_NORM_L1 = 1,
  SEMRATE_NORM_L2 = 2,
} SemrateNorm;

/**
 * Status codes returned by every entry point.
 */
typedef enum {
  SEMRATE_STATUS_OK = 0,
  SEMRATE_STATUS_NULL_POINTER = 1,
  SEMRATE_STATUS_INVALID_ARGUMENT = 2,
  SEMRATE_STATUS_INFEASIBLE = 3,
  SEMRATE_STATUS_BUFFER_TOO_SMALL = 4,
  SEMRATE_STATUS_INTERNAL = 5,
} SemrateStatus;

/**
 * A computation graph whose output is bounded.
 */
typedef struct SemrateGraph SemrateGraph;

/**
 * Solver output; read with the `semrate_solution_*` accessors.
 */
typedef struct SemrateSolution SemrateSolution;

/**
 * Rate-allocation problem under construction.
 */
typedef struct SemrateSolver SemrateSolver;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes) and returns the full message length.
 */
size_t semrate_last_error(char *buf, size_t len);

/**
 * C = ½·log₂(1 + snr).
 */
SemrateStatus semrate_capacity(double snr, double *out_capacity);

/**
 * V = 1 − (1 + snr)⁻².
 */
SemrateStatus semrate_dispersion(double snr, double *out_dispersion);

/**
 * Block error probability at `rate` bits per channel use.
 */
SemrateStatus semrate_error_prob(double snr, uint64_t blocklength, double rate, double *out_eps);

/**
 * Creates an empty solver. `tol <= 0` and `max_iter == 0` select defaults.
 */
SemrateStatus semrate_solver_new(double delta0,
                                 double tol,
                                 size_t max_iter,
                                 SemrateSolver **out_solver);

/**
 * Adds a modality described by its link: payload D bits, importance κ,
 * B quantization bits, SNR and blocklength.
 */
SemrateStatus semrate_solver_add_link(SemrateSolver *solver,
                                      double payload_bits,
                                      double kappa,
                                      uint32_t bits,
                                      double snr,
                                      uint64_t blocklength);

/**
 * Adds a modality given directly by its logistic constants (a, b, k).
 */
SemrateStatus semrate_solver_add_constants(SemrateSolver *solver,
                                           double payload_bits,
                                           double a,
                                           double b,
                                           double k);

/**
 * Solves the allocation. Infeasible budgets return `Infeasible` with both
 * sides of the violated inequality in the error message.
 */
SemrateStatus semrate_solver_solve(const SemrateSolver *solver, SemrateSolution **out_solution);

void semrate_solver_free(SemrateSolver *solver);

/**
 * τ*, the common delay 1/τ*, the predicted distortion and whether the
 * budget was non-binding (`capped`). Any out pointer may be null.
 */
SemrateStatus semrate_solution_summary(const SemrateSolution *sol,
                                       double *out_tau,
                                       double *out_delay,
                                       double *out_gamma_pred,
                                       bool *out_capped);

/**
 * Number of modalities in the solution.
 */
SemrateStatus semrate_solution_len(const SemrateSolution *sol, size_t *out_len);

/**
 * Copies per-modality rates and error probabilities; either buffer may be
 * null. Buffers must hold `semrate_solution_len` elements.
 */
SemrateStatus semrate_solution_rates(const SemrateSolution *sol,
                                     double *rates,
                                     double *eps,
                                     size_t len);

void semrate_solution_free(SemrateSolution *sol);

/**
 * Parses a graph from NUL-terminated JSON: either a graph document or a
 * fusion-model document, whose decoder is used.
 */
SemrateStatus semrate_graph_from_json(const char *json, SemrateGraph **out_graph);

/**
 * Number of modalities and total input dimension of the graph.
 */
SemrateStatus semrate_graph_dims(const SemrateGraph *graph,
                                 size_t *out_modalities,
                                 size_t *out_input_dim);

void semrate_graph_free(SemrateGraph *graph);

/**
 * Robustness bound γ over the ball of per-modality radii around the
 * concatenated `center`, with the per-modality importance κ written to
 * `out_kappa` (one entry per modality; may be null). `norm` is a
 * [`SemrateNorm`] value.
 */
SemrateStatus semrate_robustness(const SemrateGraph *graph,
                                 const double *center,
                                 size_t center_len,
                                 const double *radii,
                                 size_t num_radii,
                                 uint32_t norm,
                                 double *out_gamma,
                                 double *out_kappa);

/**
 * Quantizes `n` values in [0, 1] to `bits` bits each and packs the bits
 * MSB first into `out_bytes`. `out_written` receives the byte count,
 * ⌈n·bits/8⌉, also on `BufferTooSmall`.
 */
SemrateStatus semrate_quantize(const double *values,
                               size_t n,
                               uint32_t bits,
                               uint8_t *out_bytes,
                               size_t capacity,
                               size_t *out_written);

/**
 * Inverse of [`semrate_quantize`]: writes `n` values to `out_values`.
 */
SemrateStatus semrate_dequantize(const uint8_t *bytes,
                                 size_t len,
                                 uint32_t bits,
                                 size_t n,
                                 double *out_values);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEMRATE_H */
