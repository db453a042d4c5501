#ifndef EARCAN_H
#define EARCAN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EarcanStatus {
  EARCAN_STATUS_OK = 0,
  EARCAN_STATUS_NULL_POINTER = 1,
  EARCAN_STATUS_INVALID_ARGUMENT = 2,
  EARCAN_STATUS_CONFIG = 3,
  EARCAN_STATUS_STAGE = 4,
  EARCAN_STATUS_PROTOCOL = 5,
  EARCAN_STATUS_PANIC = 6,
} EarcanStatus;

typedef enum EarcanPhase {
  EARCAN_PHASE_INITIAL_LOGIN = 0,
  EARCAN_PHASE_AUTHENTICATED = 1,
  EARCAN_PHASE_LOCKED = 2,
} EarcanPhase;

/**
 * Opaque experiment configuration.
 */
typedef struct EarcanConfig EarcanConfig;

/**
 * Opaque continuous-authentication session.
 */
typedef struct EarcanSession EarcanSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *earcan_version(void);

/**
 * Message of the last failure on this thread, or NULL. Valid until the next
 * failing call on the same thread.
 */
const char *earcan_last_error(void);

/**
 * Threshold in quiet at `freq_hz`, in dBFS.
 *
 * # Safety
 * `out_dbfs` must be valid for writes.
 */
enum EarcanStatus earcan_threshold_in_quiet(double freq_hz, double *out_dbfs);

/**
 * Equal error rate and its threshold from two score lists.
 *
 * # Safety
 * `genuine` and `imposter` must point to `n_genuine` and `n_imposter`
 * readable doubles; the out-pointers must be valid for writes.
 */
enum EarcanStatus earcan_eer(const double *genuine,
                             size_t n_genuine,
                             const double *imposter,
                             size_t n_imposter,
                             double *out_eer,
                             double *out_threshold);

/**
 * Cosine score of `probe` against a template built from `template`. Both
 * vectors are normalised first.
 *
 * # Safety
 * Both arrays must hold `dim` readable doubles; `out_score` must be valid for writes.
 */
enum EarcanStatus earcan_score(const double *template_,
                               const double *probe,
                               size_t dim,
                               double *out_score);

/**
 * New config holding the built-in defaults.
 */
struct EarcanConfig *earcan_config_default(void);

/**
 * Parses and validates a TOML config.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum EarcanStatus earcan_config_from_toml(const char *toml, struct EarcanConfig **out);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum EarcanStatus earcan_config_set_seed(struct EarcanConfig *cfg, uint64_t seed);

/**
 * SHA-256 of the canonical config, as a string to release with [`earcan_string_free`].
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be valid for writes.
 */
enum EarcanStatus earcan_config_hash(const struct EarcanConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be NULL or a handle not yet freed.
 */
void earcan_config_free(struct EarcanConfig *cfg);

/**
 * Runs the full experiment and returns the metrics report as JSON.
 * `out_dir` may be NULL to keep artifacts in memory; `with_sessions`
 * enables the session scenarios.
 *
 * # Safety
 * `cfg` must be a live handle, `out_dir` NULL or a NUL-terminated path,
 * `out_json` valid for writes.
 */
enum EarcanStatus earcan_run_experiment(const struct EarcanConfig *cfg,
                                        const char *out_dir,
                                        bool with_sessions,
                                        char **out_json);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library and not yet freed.
 */
void earcan_string_free(char *s);

/**
 * Starts a session in the login phase. Thresholds, `k_fail` and the template
 * vector are required; the other settings keep their defaults.
 *
 * # Safety
 * `template` must hold `dim` readable doubles; `out` must be valid for writes.
 */
enum EarcanStatus earcan_session_new(double theta_accept,
                                     double theta_update,
                                     uint32_t k_fail,
                                     const double *template_,
                                     size_t dim,
                                     struct EarcanSession **out);

/**
 * Strict login with an already computed score.
 *
 * # Safety
 * `s` must be a live handle; `out_phase` NULL or valid for writes.
 */
enum EarcanStatus earcan_session_login(struct EarcanSession *s,
                                       uint64_t now_ms,
                                       double score,
                                       enum EarcanPhase *out_phase);

/**
 * One continuous-authentication window.
 *
 * # Safety
 * `s` must be a live handle; `out_phase` NULL or valid for writes.
 */
enum EarcanStatus earcan_session_window(struct EarcanSession *s,
                                        uint64_t now_ms,
                                        double score,
                                        enum EarcanPhase *out_phase);

/**
 * Re-login after a lock.
 *
 * # Safety
 * `s` must be a live handle; `out_phase` NULL or valid for writes.
 */
enum EarcanStatus earcan_session_relogin(struct EarcanSession *s,
                                         uint64_t now_ms,
                                         double score,
                                         enum EarcanPhase *out_phase);

/**
 * Audit log as JSON lines, released with [`earcan_string_free`].
 *
 * # Safety
 * `s` must be a live handle; `out` must be valid for writes.
 */
enum EarcanStatus earcan_session_trace(const struct EarcanSession *s, char **out);

/**
 * # Safety
 * `s` must be NULL or a handle not yet freed.
 */
void earcan_session_free(struct EarcanSession *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EARCAN_H */
