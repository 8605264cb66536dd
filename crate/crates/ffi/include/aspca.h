#ifndef ASPCA_H
#define ASPCA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum AspcaStatus {
  ASPCA_STATUS_OK = 0,
  ASPCA_STATUS_NULL_POINTER = 1,
  ASPCA_STATUS_INVALID_ARGUMENT = 2,
  ASPCA_STATUS_SOLVER_FAILURE = 3,
  ASPCA_STATUS_INVALID_STATE = 4,
  ASPCA_STATUS_PARSE_ERROR = 5,
  ASPCA_STATUS_IO_ERROR = 6,
  ASPCA_STATUS_PANIC = 7,
} AspcaStatus;

/**
 * Reduced PCA basis.
 */
typedef struct AspcaBasis AspcaBasis;

/**
 * Misfit-only inverse problem with fixed observations.
 */
typedef struct AspcaProblem AspcaProblem;

/**
 * Time-stepping parameters, mirroring the library configuration.
 */
typedef struct AspcaSimConfig {
  double t_end;
  size_t n_steps;
  double u0;
  double flux_left;
  double flux_right;
  double newton_tol;
  size_t newton_max_iter;
} AspcaSimConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length
 * including the terminator, or 0 when there is no error.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t aspca_last_error(char *buf, size_t len);

struct AspcaSimConfig aspca_sim_config_default(void);

/**
 * Runs the forward model and writes `(n_steps + 1) * n_cells` states,
 * row-major by step, into `states`.
 *
 * # Safety
 * Pointers must be valid for their stated lengths; `cfg` must be non-null.
 */
enum AspcaStatus aspca_simulate(const double *d,
                                size_t n_cells,
                                double length,
                                const struct AspcaSimConfig *cfg,
                                double *states,
                                size_t states_len);

/**
 * Builds a basis from `n_real` realizations of `n_cells` values each
 * (row-major). Truncation keeps the smallest count reaching
 * `energy_threshold`, capped at `max_components` when it is nonzero.
 *
 * # Safety
 * `data` must hold `n_real * n_cells` values; `out` must be non-null.
 */
enum AspcaStatus aspca_basis_from_realizations(const double *data,
                                               size_t n_real,
                                               size_t n_cells,
                                               double energy_threshold,
                                               size_t max_components,
                                               struct AspcaBasis **out);

/**
 * # Safety
 * `basis` must be null or a handle from this library, not yet freed.
 */
void aspca_basis_free(struct AspcaBasis *basis);

/**
 * # Safety
 * `basis` must be a live handle; output pointers may be null.
 */
enum AspcaStatus aspca_basis_dims(const struct AspcaBasis *basis,
                                  size_t *n_cells,
                                  size_t *n_retained,
                                  size_t *n_complement);

/**
 * Retained eigenvalues, largest first.
 *
 * # Safety
 * `basis` must be a live handle; `out` valid for `len` values.
 */
enum AspcaStatus aspca_basis_eigenvalues(const struct AspcaBasis *basis, double *out, size_t len);

/**
 * `m = mean + W diag(sqrt(beta)) xi`.
 *
 * # Safety
 * Pointers must be valid for their stated lengths.
 */
enum AspcaStatus aspca_basis_synthesize(const struct AspcaBasis *basis,
                                        const double *xi,
                                        size_t n_xi,
                                        double *m_out,
                                        size_t n_m);

/**
 * Latent coordinates of `m`.
 *
 * # Safety
 * Pointers must be valid for their stated lengths.
 */
enum AspcaStatus aspca_basis_project(const struct AspcaBasis *basis,
                                     const double *m,
                                     size_t n_m,
                                     double *xi_out,
                                     size_t n_xi);

/**
 * Latent gradient from a model-space gradient.
 *
 * # Safety
 * Pointers must be valid for their stated lengths.
 */
enum AspcaStatus aspca_basis_chain_gradient(const struct AspcaBasis *basis,
                                            const double *grad_m,
                                            size_t n_m,
                                            double *grad_xi,
                                            size_t n_xi);

/**
 * Rotation update in product mode with Gram-Schmidt. A new handle is
 * written to `out`; the input handle is unchanged.
 *
 * # Safety
 * Pointers must be valid for their stated lengths; `out` non-null.
 */
enum AspcaStatus aspca_basis_rotate(const struct AspcaBasis *basis,
                                    const double *grad_m,
                                    size_t n_m,
                                    double epsilon,
                                    struct AspcaBasis **out);

/**
 * Promotes the `n_add` most sensitive complement vectors.
 *
 * # Safety
 * Pointers must be valid for their stated lengths; `out` non-null.
 */
enum AspcaStatus aspca_basis_extend(const struct AspcaBasis *basis,
                                    const double *grad_m,
                                    size_t n_m,
                                    size_t n_add,
                                    struct AspcaBasis **out);

/**
 * Exchanges `n_swap` retained/complement pairs.
 *
 * # Safety
 * Pointers must be valid for their stated lengths; `out` non-null.
 */
enum AspcaStatus aspca_basis_swap(const struct AspcaBasis *basis,
                                  const double *grad_m,
                                  size_t n_m,
                                  size_t n_swap,
                                  struct AspcaBasis **out);

/**
 * Creates a problem from observations `values` (`n_times * n_locations`,
 * row-major by time) at step indices `times` and cells `locations`.
 *
 * # Safety
 * Pointers must be valid for their stated lengths; `cfg`, `out` non-null.
 */
enum AspcaStatus aspca_problem_new(size_t n_cells,
                                   double length,
                                   const struct AspcaSimConfig *cfg,
                                   const size_t *times,
                                   size_t n_times,
                                   const size_t *locations,
                                   size_t n_locations,
                                   const double *values,
                                   double noise_std,
                                   struct AspcaProblem **out);

/**
 * # Safety
 * `problem` must be null or a live handle.
 */
void aspca_problem_free(struct AspcaProblem *problem);

/**
 * Objective value at coefficient field `d`.
 *
 * # Safety
 * Pointers must be valid for their stated lengths.
 */
enum AspcaStatus aspca_problem_objective(const struct AspcaProblem *problem,
                                         const double *d,
                                         size_t n,
                                         double *value);

/**
 * Objective and adjoint gradient at `d`; `grad` must hold `n` values.
 *
 * # Safety
 * Pointers must be valid for their stated lengths.
 */
enum AspcaStatus aspca_problem_gradient(const struct AspcaProblem *problem,
                                        const double *d,
                                        size_t n,
                                        double *value,
                                        double *grad);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ASPCA_H */
