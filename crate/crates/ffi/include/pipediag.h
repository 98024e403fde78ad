#ifndef PIPEDIAG_H
#define PIPEDIAG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PdFate {
  PD_FATE_AMPLIFIER = 0,
  PD_FATE_PROPAGATOR = 1,
  PD_FATE_COMPENSATOR = 2,
} PdFate;

typedef enum PdStatus {
  PD_STATUS_OK = 0,
  PD_STATUS_NULL_POINTER = 1,
  PD_STATUS_INVALID_UTF8 = 2,
  PD_STATUS_INVALID_ARGUMENT = 3,
  PD_STATUS_EMPTY = 4,
  PD_STATUS_DEGENERATE = 5,
  PD_STATUS_LENGTH_MISMATCH = 6,
  PD_STATUS_JSON = 7,
  PD_STATUS_ENGINE = 8,
  PD_STATUS_PANIC = 99,
} PdStatus;

/**
 * Opaque engine holding an agent configuration and run settings.
 */
typedef struct PdEngine PdEngine;

/**
 * Paired-test result written by [`pd_wilcoxon`].
 */
typedef struct PdWilcoxon {
  double statistic;
  double p_value;
  size_t n_nonzero;
  bool exact;
} PdWilcoxon;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next call into the library on the same thread.
 */
const char *pd_last_error(void);

/**
 * Static version string; do not free.
 */
const char *pd_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void pd_string_free(char *s);

/**
 * F = −Σ ln(1 − s_i) over `len` severities.
 *
 * # Safety
 * `sev` points to `len` doubles; `out` is writable.
 */
enum PdStatus pd_failure_index(const double *sev, size_t len, double *out);

/**
 * Wilcoxon signed-rank on paired differences; exact when small enough.
 *
 * # Safety
 * `diffs` points to `len` doubles; `out` is writable.
 */
enum PdStatus pd_wilcoxon(const double *diffs, size_t len, struct PdWilcoxon *out);

/**
 * Holm-adjusted p-values written to `out` in input order.
 *
 * # Safety
 * `raw` and `out` each hold `len` doubles.
 */
enum PdStatus pd_holm(const double *raw, size_t len, double *out);

/**
 * Paired effect size d_z of `len` differences.
 *
 * # Safety
 * `diffs` points to `len` doubles; `out` is writable.
 */
enum PdStatus pd_cohens_dz(const double *diffs, size_t len, double *out);

/**
 * Interval Krippendorff alpha for two raters over `len` units.
 *
 * # Safety
 * `a` and `b` each hold `len` doubles; `out` is writable.
 */
enum PdStatus pd_krippendorff_alpha(const double *a, const double *b, size_t len, double *out);

/**
 * Bag-of-words cosine between two UTF-8 strings.
 *
 * # Safety
 * `a` and `b` are NUL-terminated; `out` is writable.
 */
enum PdStatus pd_bow_cosine(const char *a, const char *b, double *out);

/**
 * Fate of a module given its indirect effect and threshold τ.
 *
 * # Safety
 * `out` is writable.
 */
enum PdStatus pd_classify_fate(double nie, double tau, enum PdFate *out);

/**
 * Builds an engine from a synthetic-agent config (JSON object, `{}` for
 * defaults) and optional run settings (null for defaults).
 *
 * # Safety
 * `config_json` is NUL-terminated; `spec_json` is null or NUL-terminated;
 * `out` is writable.
 */
enum PdStatus pd_engine_new(const char *config_json, const char *spec_json, struct PdEngine **out);

/**
 * Releases an engine. Null is ignored.
 *
 * # Safety
 * `engine` must come from [`pd_engine_new`] and not be freed twice.
 */
void pd_engine_free(struct PdEngine *engine);

/**
 * Runs diagnosis and the configuration sweep; writes the report as a JSON
 * string the caller frees with [`pd_string_free`].
 *
 * # Safety
 * `engine` is a live engine; `out_json` is writable.
 */
enum PdStatus pd_engine_run_paradox(const struct PdEngine *engine, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PIPEDIAG_H */
