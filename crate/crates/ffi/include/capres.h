#ifndef CAPRES_H
#define CAPRES_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum CapresStatus {
  CAPRES_STATUS_OK = 0,
  CAPRES_STATUS_INVALID_INPUT = 1,
  CAPRES_STATUS_UNDER_RESOLVED = 2,
  CAPRES_STATUS_RESOLUTION_MISMATCH = 3,
  CAPRES_STATUS_NOT_ADMISSIBLE = 4,
  CAPRES_STATUS_NON_CONVERGENCE = 5,
  CAPRES_STATUS_IO = 6,
  CAPRES_STATUS_NULL_POINTER = 7,
  CAPRES_STATUS_PANIC = 8,
} CapresStatus;

/**
 * Opaque Cantor-cylinder domain handle.
 */
typedef struct CapresCantorDomain CapresCantorDomain;

/**
 * Opaque condenser handle.
 */
typedef struct CapresCondenser CapresCondenser;

/**
 * Outcome of a grid solve.
 */
typedef struct CapresCapacity {
  double value;
  double residual;
  size_t iterations;
  /**
   * Exponent the solver actually used.
   */
  double p_used;
  bool converged;
  bool approximate;
} CapresCapacity;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *capres_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *capres_version(void);

/**
 * Closed-form capacity of `(B(r), complement of B(R))` in dimension `n`.
 *
 * # Safety
 * `out` must be a valid pointer to a `double`.
 */
enum CapresStatus capres_oracle_concentric_balls(size_t n,
                                                 double p,
                                                 double r,
                                                 double big_r,
                                                 double *out);

/**
 * Lower bound of the admissible `lambda` range.
 *
 * # Safety
 * `out` must be a valid pointer to a `double`.
 */
enum CapresStatus capres_lambda_o(size_t n, double p, double q, double *out);

/**
 * Length of the level-`level` Smith-Volterra-Cantor approximation.
 *
 * # Safety
 * `out` must be a valid pointer to a `double`.
 */
enum CapresStatus capres_svc_measure(size_t level, double *out);

/**
 * `(B(x, r), A(x; R, 2R); B(x, 2R))` centred at the origin of `R^n`.
 *
 * # Safety
 * `out` must be a valid pointer to a handle pointer.
 */
enum CapresStatus capres_condenser_concentric_balls(size_t n,
                                                    double r,
                                                    double big_r,
                                                    double p,
                                                    struct CapresCondenser **out);

/**
 * Condenser from its JSON description.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` a valid pointer.
 */
enum CapresStatus capres_condenser_from_json(const char *json, struct CapresCondenser **out);

/**
 * Releases a condenser. Null is ignored.
 *
 * # Safety
 * `c` must come from a `capres_condenser_*` constructor and not be used afterwards.
 */
void capres_condenser_free(struct CapresCondenser *c);

/**
 * Grid solve with default options on a lattice with `grid` nodes along the
 * longest side of the ambient bounding box.
 *
 * # Safety
 * `c` must be a live handle; `out` a valid pointer.
 */
enum CapresStatus capres_solve_capacity(const struct CapresCondenser *c,
                                        size_t grid,
                                        struct CapresCapacity *out);

/**
 * Builds the Cantor-cylinder domain in `R^3` with `h(t) = t` and the first
 * `m` nonempty generations. `tilde` selects thin cylinders.
 *
 * # Safety
 * `out` must be a valid pointer to a handle pointer.
 */
enum CapresStatus capres_cantor_build(double q,
                                      double lambda,
                                      size_t m,
                                      size_t svc_level,
                                      bool tilde,
                                      struct CapresCantorDomain **out);

/**
 * Number of cylinders in the domain.
 *
 * # Safety
 * `d` must be a live handle; `out` a valid pointer.
 */
enum CapresStatus capres_cantor_cylinder_count(const struct CapresCantorDomain *d, size_t *out);

/**
 * Membership of the point `z[0..len]`.
 *
 * # Safety
 * `d` must be a live handle, `z` must point to `len` doubles, `out` valid.
 */
enum CapresStatus capres_cantor_contains(const struct CapresCantorDomain *d,
                                         const double *z,
                                         size_t len,
                                         bool *out);

/**
 * Releases a domain. Null is ignored.
 *
 * # Safety
 * `d` must come from [`capres_cantor_build`] and not be used afterwards.
 */
void capres_cantor_free(struct CapresCantorDomain *d);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAPRES_H */
