#ifndef SIDA_H
#define SIDA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Values match the `sida` command's exit statuses where
 * they overlap.
 */
typedef enum SidaStatus {
  SIDA_STATUS_OK = 0,
  SIDA_STATUS_NULL_ARGUMENT = 1,
  SIDA_STATUS_CONFIG = 2,
  SIDA_STATUS_NUMERIC = 3,
  SIDA_STATUS_IO = 4,
  SIDA_STATUS_INVALID = 5,
  SIDA_STATUS_PANIC = 6,
} SidaStatus;

/**
 * A run configuration.
 */
typedef struct SidaConfig SidaConfig;

/**
 * A Gaussian mixture data model.
 */
typedef struct SidaModel SidaModel;

/**
 * Final numbers of a completed training run.
 */
typedef struct SidaRunSummary {
  uint64_t images_seen;
  uint64_t generator_steps;
  uint64_t fake_score_steps;
  /**
   * EMA generator against held-out data.
   */
  double energy_distance;
  double sliced_wasserstein;
  double frechet_feature_distance;
} SidaRunSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *sida_last_error(void);

/**
 * Parses a TOML run configuration.
 *
 * # Safety
 * `toml` must be a nul-terminated string and `out` a valid pointer.
 */
enum SidaStatus sida_config_from_toml(const char *toml, struct SidaConfig **out);

/**
 * Loads a shipped preset such as `ring-8/corrupted-sida`.
 *
 * # Safety
 * `name` must be a nul-terminated string and `out` a valid pointer.
 */
enum SidaStatus sida_config_from_preset(const char *name, struct SidaConfig **out);

/**
 * Applies one `section.key=value` override.
 *
 * # Safety
 * `cfg` must come from this library; `assignment` must be nul-terminated.
 */
enum SidaStatus sida_config_set(struct SidaConfig *cfg, const char *assignment);

/**
 * Checks the configuration without running it.
 *
 * # Safety
 * `cfg` must come from this library.
 */
enum SidaStatus sida_config_validate(const struct SidaConfig *cfg);

/**
 * Writes the 64 hex digits of the checkpoint compatibility hash and a
 * terminating nul into `buf`, which must hold at least 65 bytes.
 *
 * # Safety
 * `cfg` must come from this library; `buf` must be writable for `len` bytes.
 */
enum SidaStatus sida_config_compat_hash(const struct SidaConfig *cfg, char *buf, uintptr_t len);

/**
 * # Safety
 * `cfg` must come from this library or be null; it must not be used again.
 */
void sida_config_free(struct SidaConfig *cfg);

/**
 * Trains into `out_dir` (or the configured output directory when null).
 *
 * # Safety
 * `cfg` must come from this library; `out_dir` must be null or
 * nul-terminated; `summary` must be null or valid.
 */
enum SidaStatus sida_train(const struct SidaConfig *cfg,
                           const char *out_dir,
                           struct SidaRunSummary *summary);

/**
 * Loads a named data model (`ring-8`, `grid-25`, `two-moons-gmm`,
 * `gauss-2d`, `patterns-8x8`).
 *
 * # Safety
 * `name` must be nul-terminated and `out` valid.
 */
enum SidaStatus sida_model_from_preset(const char *name, struct SidaModel **out);

/**
 * # Safety
 * `model` must come from this library.
 */
uintptr_t sida_model_dim(const struct SidaModel *model);

/**
 * Posterior means `E[x_0 | x_t]` of `n` row-major points at signal scale
 * `a` and noise `sigma`.
 *
 * # Safety
 * `x` and `out` must hold `n * dim` doubles.
 */
enum SidaStatus sida_model_denoise(const struct SidaModel *model,
                                   const double *x,
                                   uintptr_t n,
                                   double a,
                                   double sigma,
                                   double *out);

/**
 * # Safety
 * `model` must come from this library or be null; it must not be used again.
 */
void sida_model_free(struct SidaModel *model);

/**
 * Energy distance between two row-major sample sets of dimension `dim`.
 *
 * # Safety
 * `a` must hold `n_a * dim` doubles, `b` `n_b * dim`, and `out` one.
 */
enum SidaStatus sida_energy_distance(const double *a,
                                     uintptr_t n_a,
                                     const double *b,
                                     uintptr_t n_b,
                                     uintptr_t dim,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SIDA_H */
