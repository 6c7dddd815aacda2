#ifndef OPM_H
#define OPM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum {
  OPM_STATUS_OK = 0,
  OPM_STATUS_NULL_ARGUMENT = 1,
  OPM_STATUS_INVALID_UTF8 = 2,
  OPM_STATUS_PARSE_ERROR = 3,
  OPM_STATUS_INVALID_ARGUMENT = 4,
  OPM_STATUS_ENGINE_ERROR = 5,
  OPM_STATUS_PANIC = 6,
} OpmStatus;

/**
 * A parsed market.
 */
typedef struct OpmInstance OpmInstance;

/**
 * The report of one mechanism run.
 */
typedef struct OpmOutcome OpmOutcome;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *opm_last_error_message(void);

/**
 * Parses an instance document into `*out`.
 *
 * # Safety
 * `json` must be a nul-terminated string and `out` a writable pointer.
 */
OpmStatus opm_instance_parse(const char *json, OpmInstance **out_instance);

/**
 * # Safety
 * `instance` must come from [`opm_instance_parse`] and not be freed twice.
 */
void opm_instance_free(OpmInstance *instance);

/**
 * Size of the optimal trade set.
 *
 * # Safety
 * Pointers must be valid.
 */
OpmStatus opm_instance_tau(const OpmInstance *instance, size_t *out_tau);

/**
 * Sets `*passed` to whether no entity exceeds `alpha` times the optimum.
 *
 * # Safety
 * Pointers must be valid and `alpha` nul-terminated.
 */
OpmStatus opm_instance_validate(const OpmInstance *instance, const char *alpha, bool *passed);

/**
 * Runs the mechanism on truthful reports.
 *
 * # Safety
 * Pointers must be valid and `alpha` nul-terminated.
 */
OpmStatus opm_run(const OpmInstance *instance,
                  const char *alpha,
                  uint64_t seed,
                  OpmOutcome **out_outcome);

/**
 * Gain from trade in millionths of a money unit.
 *
 * # Safety
 * Pointers must be valid.
 */
OpmStatus opm_outcome_gft_micros(const OpmOutcome *outcome, int64_t *micros);

/**
 * # Safety
 * Pointers must be valid.
 */
OpmStatus opm_outcome_trade_count(const OpmOutcome *outcome, size_t *count);

/**
 * The run report as JSON; release it with [`opm_string_free`].
 *
 * # Safety
 * Pointers must be valid.
 */
OpmStatus opm_outcome_to_json(const OpmOutcome *outcome, char **json);

/**
 * # Safety
 * `outcome` must come from [`opm_run`] and not be freed twice.
 */
void opm_outcome_free(OpmOutcome *outcome);

/**
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void opm_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OPM_H */
