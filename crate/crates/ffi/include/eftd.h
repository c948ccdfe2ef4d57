#ifndef EFTD_H
#define EFTD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EftdStatus {
  EFTD_STATUS_OK = 0,
  EFTD_STATUS_NULL_POINTER = 1,
  EFTD_STATUS_INVALID_ARGUMENT = 2,
  EFTD_STATUS_DIMENSION_MISMATCH = 3,
  EFTD_STATUS_NUMERICAL = 4,
  EFTD_STATUS_IO = 5,
  EFTD_STATUS_VERIFICATION_FAILED = 6,
  EFTD_STATUS_PANIC = 7,
} EftdStatus;

/**
 * Observation model for [`eftd_agent_new`].
 */
typedef enum EftdSampler {
  EFTD_SAMPLER_MEAN_PATH = 0,
  EFTD_SAMPLER_IID = 1,
  EFTD_SAMPLER_MARKOV = 2,
} EftdSampler;

/**
 * A single EF-TD learner bound to an environment.
 */
typedef struct EftdAgent EftdAgent;

/**
 * Environment with its ground truth.
 */
typedef struct EftdEnv EftdEnv;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length.
 */
size_t eftd_last_error_message(char *buf, size_t len);

/**
 * Generates a random environment with rewards in `[0, 1]`.
 */
enum EftdStatus eftd_env_generate(size_t n,
                                  size_t k,
                                  double gamma,
                                  uint64_t seed,
                                  struct EftdEnv **out);

/**
 * Loads an environment JSON document.
 */
enum EftdStatus eftd_env_load_json(const char *path, struct EftdEnv **out);

void eftd_env_free(struct EftdEnv *env);

/**
 * Feature dimension `K`.
 */
enum EftdStatus eftd_env_dim(const struct EftdEnv *env, size_t *out);

enum EftdStatus eftd_env_theta_star(const struct EftdEnv *env, double *out, size_t len);

/**
 * Smallest eigenvalue of `ΦᵀDΦ`.
 */
enum EftdStatus eftd_env_omega(const struct EftdEnv *env, double *out);

/**
 * `E_π‖g(X, θ*)‖²`.
 */
enum EftdStatus eftd_env_sigma_sq(const struct EftdEnv *env, double *out);

/**
 * Runs the lemma suite; `all_pass` receives 1 or 0. Returns
 * `VERIFICATION_FAILED` when any check fails.
 */
enum EftdStatus eftd_env_verify(const struct EftdEnv *env,
                                size_t trials,
                                uint64_t seed,
                                int32_t *all_pass);

/**
 * Creates an EF-TD agent at `θ₀ = 0`.
 *
 * `compressor` is `identity`, `topk:k`, `signscaled`, `signraw` or
 * `randk:k`. A positive `projection_radius` enables projection onto that
 * ball.
 */
enum EftdStatus eftd_agent_new(const struct EftdEnv *env,
                               const char *compressor,
                               double alpha,
                               enum EftdSampler sampler,
                               double projection_radius,
                               uint64_t seed,
                               struct EftdAgent **out);

void eftd_agent_free(struct EftdAgent *agent);

/**
 * Advances the agent by `steps` EF-TD steps.
 */
enum EftdStatus eftd_agent_step(struct EftdAgent *agent, uint64_t steps);

enum EftdStatus eftd_agent_theta(const struct EftdAgent *agent, double *out, size_t len);

/**
 * Error-feedback memory `e_{t-1}`.
 */
enum EftdStatus eftd_agent_memory(const struct EftdAgent *agent, double *out, size_t len);

/**
 * `‖θ_t − θ*‖²`.
 */
enum EftdStatus eftd_agent_error(const struct EftdAgent *agent, double *out);

/**
 * Steps taken so far.
 */
enum EftdStatus eftd_agent_steps(const struct EftdAgent *agent, uint64_t *out);

/**
 * Applies a compressor to `x`, writing `len` values to `out`.
 */
enum EftdStatus eftd_compress(const char *compressor,
                              const double *x,
                              double *out,
                              size_t len,
                              uint64_t seed);

/**
 * Distortion factor `δ` of a compressor on dimension `len`; negative for
 * non-contractive operators. For `randk:k` the value holds in expectation.
 */
enum EftdStatus eftd_compressor_delta(const char *compressor, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EFTD_H */
