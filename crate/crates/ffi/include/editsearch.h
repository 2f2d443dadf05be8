#ifndef EDITSEARCH_H
#define EDITSEARCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EsStatus {
  ES_STATUS_OK = 0,
  ES_STATUS_NULL_ARGUMENT = 1,
  ES_STATUS_INVALID_UTF8 = 2,
  ES_STATUS_INVALID_ARGUMENT = 3,
  ES_STATUS_RUN_FAILED = 4,
  ES_STATUS_PANIC = 5,
} EsStatus;

/**
 * A finished simulated run.
 */
typedef struct EsRun EsRun;

/**
 * Least-squares fit of `y = slope * x + bias`. Standard errors are NaN when
 * the fit has no residual degrees of freedom.
 */
typedef struct EsFit {
  double slope;
  double bias;
  double slope_std_err;
  double bias_std_err;
  double residual_sum_squares;
} EsFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *es_version(void);

/**
 * Copy of the calling thread's last error message, or null if the last
 * call succeeded. Free with [`es_string_free`].
 */
char *es_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library and not yet freed.
 */
void es_string_free(char *s);

/**
 * Derived run configuration for `complexity` under `preset` (null means
 * `"main"`), written as JSON to `*out_json`.
 *
 * # Safety
 * `preset` must be null or a NUL-terminated string; `out_json` must be
 * writable.
 */
enum EsStatus es_derive_config(uint32_t complexity, const char *preset, char **out_json);

/**
 * Checks a generator completion against its guided-decoding pattern. On
 * success the extracted instruction is written to `*out_instruction` unless
 * it is null; a violation returns `ES_STATUS_INVALID_ARGUMENT`.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out_instruction` must be null or
 * writable.
 */
enum EsStatus es_validate_thought(const char *text, char **out_instruction);

/**
 * # Safety
 * `xs` and `ys` must each point to `n` readable doubles; `out` must be
 * writable.
 */
enum EsStatus es_linear_fit(const double *xs, const double *ys, size_t n, struct EsFit *out);

/**
 * Runs a search against the simulated backends. `request_json` holds
 * either `task` (a sim task) or `complexity` (with optional `task_seed`),
 * plus optional `preset`, `p`, `q`, `k`, `seed` and `epsilon`.
 *
 * # Safety
 * `request_json` must be a NUL-terminated string; `out_run` must be
 * writable. The handle must be released with [`es_run_free`].
 */
enum EsStatus es_sim_run(const char *request_json, struct EsRun **out_run);

/**
 * Number of non-root states in the run's topology.
 *
 * # Safety
 * `run` must be a live handle; `out_size` must be writable.
 */
enum EsStatus es_run_size(const struct EsRun *run, size_t *out_size);

/**
 * Outcome summary as JSON: `final_states`, `termination`, `fallback_used`
 * and `size`.
 *
 * # Safety
 * `run` must be a live handle; `out_json` must be writable.
 */
enum EsStatus es_run_result_json(const struct EsRun *run, char **out_json);

/**
 * The run's topology document.
 *
 * # Safety
 * `run` must be a live handle; `out_json` must be writable.
 */
enum EsStatus es_run_topology_json(const struct EsRun *run, char **out_json);

/**
 * # Safety
 * `run` must be null or a handle from [`es_sim_run`] not yet freed.
 */
void es_run_free(struct EsRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDITSEARCH_H */
