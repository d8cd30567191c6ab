#ifndef POPPROTO_H
#define POPPROTO_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  PP_STATUS_OK = 0,
  PP_STATUS_NULL_POINTER = 1,
  PP_STATUS_INVALID_ARGUMENT = 2,
  PP_STATUS_INVALID_POPULATION = 3,
  /**
   * An agent left the protocol's declared state space.
   */
  PP_STATUS_STATE_BUDGET = 4,
  /**
   * The experiment spec did not parse or validate.
   */
  PP_STATUS_INVALID_SPEC = 5,
  PP_STATUS_INTERNAL = 6,
  PP_STATUS_PANIC = 7,
} PpStatus;

typedef enum {
  PP_VARIANT_CLOCKED_MAJORITY = 0,
  PP_VARIANT_STABLE_MAJORITY = 1,
  PP_VARIANT_CONVERGENT_MAJORITY = 2,
  PP_VARIANT_UNIFORM_MAJORITY = 3,
} PpVariant;

/**
 * Opaque simulation handle.
 */
typedef struct PpSimulation PpSimulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a majority simulation with `(n + alpha) / 2` agents of opinion +1.
 *
 * `m` is the number of phases per clock round. The handle must be released
 * with `pp_sim_free`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
PpStatus pp_sim_new_majority(PpVariant variant,
                             size_t n,
                             size_t alpha,
                             uint32_t s,
                             uint32_t m,
                             uint64_t seed,
                             PpSimulation **out);

/**
 * Creates a leader-election simulation. Outputs are 1 for leader, 0 for follower.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
PpStatus pp_sim_new_leader(size_t n, uint32_t s, uint32_t m, uint64_t seed, PpSimulation **out);

/**
 * Runs `interactions` more interactions.
 *
 * # Safety
 * `sim` must be a live handle or null.
 */
PpStatus pp_sim_step(PpSimulation *sim, uint64_t interactions);

/**
 * Writes whether the current configuration satisfies the protocol's stability predicate.
 *
 * # Safety
 * `sim` must be a live handle or null; `out` must be writable or null.
 */
PpStatus pp_sim_is_stable(const PpSimulation *sim, bool *out);

/**
 * Writes the number of agents whose output equals `output`.
 *
 * # Safety
 * `sim` must be a live handle or null; `out` must be writable or null.
 */
PpStatus pp_sim_output_count(const PpSimulation *sim, int32_t output, uint64_t *out);

/**
 * # Safety
 * `sim` must be a live handle or null; `out` must be writable or null.
 */
PpStatus pp_sim_interactions(const PpSimulation *sim, uint64_t *out);

/**
 * # Safety
 * `sim` must be a live handle or null; `out` must be writable or null.
 */
PpStatus pp_sim_population(const PpSimulation *sim, size_t *out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `sim` must come from a `pp_sim_new_*` call and not have been freed.
 */
void pp_sim_free(PpSimulation *sim);

/**
 * Runs the experiment described by the JSON spec and writes the rows as a
 * CSV string to `out_csv`, to be released with `pp_string_free`.
 *
 * # Safety
 * `spec_json` must be a NUL-terminated string; `out_csv` must be writable.
 */
PpStatus pp_run_experiment_json(const char *spec_json, char **out_csv);

/**
 * # Safety
 * `s` must come from this library and not have been freed; null is ignored.
 */
void pp_string_free(char *s);

/**
 * Static, NUL-terminated description of a status code.
 */
const char *pp_status_message(PpStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POPPROTO_H */
