#ifndef MFOML_H
#define MFOML_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>

// Result code of every fallible call.
typedef enum MfomlStatus {
  MFOML_STATUS_OK = 0,
  MFOML_STATUS_NULL_POINTER = 1,
  MFOML_STATUS_INVALID_ARGUMENT = 2,
  MFOML_STATUS_INVALID_CONFIG = 3,
  // A numerical routine gave up; the message names which one.
  MFOML_STATUS_SOLVER_FAILURE = 4,
  // The caller's buffer is smaller than the reported length.
  MFOML_STATUS_BUFFER_TOO_SMALL = 5,
  MFOML_STATUS_INTERNAL = 6,
} MfomlStatus;

// Opaque model handle.
typedef struct MfomlModel MfomlModel;

// Opaque handle holding the last iterate of a solver run.
typedef struct MfomlSolution MfomlSolution;

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call into this library.
const char *mfoml_last_error(void);

// Library version as a static NUL-terminated string.
const char *mfoml_version(void);

// Builds a built-in environment with default parameters
// (`sis`, `building_evacuation` or `random_linear`).
//
// # Safety
// `name` must be a NUL-terminated string and `out` a writable pointer.
enum MfomlStatus mfoml_model_from_env(const char *name, struct MfomlModel **out);

// Builds a model from the text of a TOML environment config.
//
// # Safety
// `toml` must be a NUL-terminated string and `out` a writable pointer.
enum MfomlStatus mfoml_model_from_toml(const char *toml, struct MfomlModel **out);

// # Safety
// `model` must come from a constructor above and not be used afterwards.
void mfoml_model_free(struct MfomlModel *model);

// Writes the state count, action count and horizon.
//
// # Safety
// `model` must be a live handle; the outputs must be writable.
enum MfomlStatus mfoml_model_dims(const struct MfomlModel *model,
                                  size_t *states,
                                  size_t *actions,
                                  size_t *horizon);

// Exploitability of a policy given as `T * S * A` probabilities in flow
// layout (`t*S*A + a*S + s`).
//
// # Safety
// `model` must be a live handle and `policy` must point to `len` values.
enum MfomlStatus mfoml_exploitability(const struct MfomlModel *model,
                                      const double *policy,
                                      size_t len,
                                      double *out);

// Runs forward-backward splitting from the uniform policy. `stop` is an
// exploitability threshold for early exit; pass a negative value to run the
// full budget.
//
// # Safety
// `model` must be a live handle and `out` a writable pointer.
enum MfomlStatus mfoml_solve_fbs(const struct MfomlModel *model,
                                 double alpha,
                                 double eta,
                                 size_t max_iterations,
                                 double stop,
                                 struct MfomlSolution **out);

// # Safety
// `solution` must come from [`mfoml_solve_fbs`] and not be used afterwards.
void mfoml_solution_free(struct MfomlSolution *solution);

// Iterations run, whether the stop threshold was met, and the final
// exploitability.
//
// # Safety
// `solution` must be a live handle; the outputs must be writable.
enum MfomlStatus mfoml_solution_summary(const struct MfomlSolution *solution,
                                        size_t *iterations,
                                        bool *converged,
                                        double *exploitability);

// Copies the final policy into `out` (flow layout). Pass a null `out` with
// zero `capacity` to query the length only.
//
// # Safety
// `out` must hold `capacity` values; `len` may be null.
enum MfomlStatus mfoml_solution_policy(const struct MfomlSolution *solution,
                                       double *out,
                                       size_t capacity,
                                       size_t *len);

// Copies the final occupation measure into `out`, same contract as
// [`mfoml_solution_policy`].
//
// # Safety
// `out` must hold `capacity` values; `len` may be null.
enum MfomlStatus mfoml_solution_flow(const struct MfomlSolution *solution,
                                     double *out,
                                     size_t capacity,
                                     size_t *len);

#endif  /* MFOML_H */
