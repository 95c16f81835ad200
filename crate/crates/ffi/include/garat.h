#ifndef GARAT_H
#define GARAT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum GaratStatus {
  GARAT_STATUS_OK = 0,
  GARAT_STATUS_NULL_POINTER = 1,
  GARAT_STATUS_INVALID_ARGUMENT = 2,
  GARAT_STATUS_DIMENSION = 3,
  GARAT_STATUS_INVALID_DISTRIBUTION = 4,
  GARAT_STATUS_NON_FINITE = 5,
  GARAT_STATUS_TOO_LARGE = 6,
  GARAT_STATUS_BUFFER_TOO_SMALL = 7,
  GARAT_STATUS_PARSE = 8,
  GARAT_STATUS_IO = 9,
  GARAT_STATUS_INTERNAL = 10,
  GARAT_STATUS_PANIC = 11,
} GaratStatus;

// Which side of an environment pair to instantiate.
typedef enum GaratSide {
  GARAT_SIDE_SIM = 0,
  GARAT_SIDE_REAL = 1,
} GaratSide;

// A steppable environment (simulator, real, or grounded simulator) with its
// own random stream.
typedef struct GaratEnv GaratEnv;

// A finite MDP with explicit transition and reward tensors.
typedef struct GaratMdp GaratMdp;

// A learned action transformer.
typedef struct GaratTransformer GaratTransformer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread, or NULL.
// The pointer stays valid until the next call into the library on this
// thread; do not free it.
const char *garat_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *garat_version(void);

// Frees a string returned by the library.
//
// # Safety
// `s` must be NULL or a pointer returned by this library and not yet freed.
void garat_string_free(char *s);

// Builds an MDP from dense tensors: `transition` and `reward` hold
// `n_states * n_actions * n_states` doubles, `rho0` holds `n_states`.
//
// # Safety
// Pointers must reference arrays of the stated sizes; `out` must be writable.
enum GaratStatus garat_mdp_new(size_t n_states,
                               size_t n_actions,
                               const double *transition,
                               const double *reward,
                               const double *rho0,
                               double gamma,
                               struct GaratMdp **out);

// Parses an MDP from its JSON document.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum GaratStatus garat_mdp_from_json(const char *json, struct GaratMdp **out);

// Serializes an MDP to JSON; free the result with `garat_string_free`.
//
// # Safety
// `mdp` must be a live handle; `out` must be writable.
enum GaratStatus garat_mdp_to_json(const struct GaratMdp *mdp, char **out);

// # Safety
// `mdp` must be NULL or a live handle, which is invalid afterwards.
void garat_mdp_free(struct GaratMdp *mdp);

// Writes the number of states and actions.
//
// # Safety
// `mdp` must be a live handle; out-pointers must be writable.
enum GaratStatus garat_mdp_shape(const struct GaratMdp *mdp, size_t *n_states, size_t *n_actions);

// Exact marginal transition distribution of a policy (`n_states * n_actions`
// probabilities, row-major) written into `out_rho` (`n_states * n_actions *
// n_states` doubles).
//
// # Safety
// `mdp` must be a live handle; arrays must have the stated lengths.
enum GaratStatus garat_mdp_marginal(const struct GaratMdp *mdp,
                                    const double *policy,
                                    size_t policy_len,
                                    double *out_rho,
                                    size_t out_len);

// Expected discounted return of a policy, computed two ways: by exact policy
// evaluation (`out_value`) and through the marginal (`out_from_marginal`).
// Either out-pointer may be NULL.
//
// # Safety
// `mdp` must be a live handle; `policy` must hold `policy_len` doubles.
enum GaratStatus garat_mdp_policy_return(const struct GaratMdp *mdp,
                                         const double *policy,
                                         size_t policy_len,
                                         double *out_value,
                                         double *out_from_marginal);

// Instantiates one side of an environment pair. `pair_json` is a pair
// description (`{"env":"pendulum","property":"mass","default":4.89,
// "modified":100.0}`) or NULL for the default pendulum pair.
//
// # Safety
// `pair_json` must be NULL or NUL-terminated; `out` must be writable.
enum GaratStatus garat_env_new(const char *pair_json,
                               enum GaratSide side,
                               uint64_t seed,
                               struct GaratEnv **out);

// Wraps a copy of `sim` with a transformer, deploying its mean action.
//
// # Safety
// Handles must be live; `out` must be writable.
enum GaratStatus garat_env_grounded(const struct GaratEnv *sim,
                                    const struct GaratTransformer *transformer,
                                    uint64_t seed,
                                    struct GaratEnv **out);

// # Safety
// `env` must be NULL or a live handle, which is invalid afterwards.
void garat_env_free(struct GaratEnv *env);

// Observation dimension, action dimension and horizon.
//
// # Safety
// `env` must be a live handle; out-pointers must be writable.
enum GaratStatus garat_env_dims(const struct GaratEnv *env,
                                size_t *obs_dim,
                                size_t *action_dim,
                                size_t *horizon);

// Draws a start state and writes it to `out_state`.
//
// # Safety
// `env` must be a live handle; `out_state` must hold `out_len` doubles.
enum GaratStatus garat_env_reset(struct GaratEnv *env, double *out_state, size_t out_len);

// Makes `state` the current state.
//
// # Safety
// `env` must be a live handle; `state` must hold `len` doubles.
enum GaratStatus garat_env_set_state(struct GaratEnv *env, const double *state, size_t len);

// Advances one step. Writes the next state, the reward and whether the
// episode terminated.
//
// # Safety
// `env` must be a live handle; arrays must have the stated lengths;
// `reward` and `done` must be writable.
enum GaratStatus garat_env_step(struct GaratEnv *env,
                                const double *action,
                                size_t action_len,
                                double *out_next_state,
                                size_t out_len,
                                double *reward,
                                bool *done);

// Parses a transformer checkpoint (as written by the `ground` command).
//
// # Safety
// `json` must be NUL-terminated; `out` must be writable.
enum GaratStatus garat_transformer_from_json(const char *json,
                                             uint64_t seed,
                                             struct GaratTransformer **out);

// # Safety
// `t` must be NULL or a live handle, which is invalid afterwards.
void garat_transformer_free(struct GaratTransformer *t);

// Deployed (mean or most likely) transformed action for `(state, action)`.
//
// # Safety
// `t` must be a live handle; arrays must have the stated lengths.
enum GaratStatus garat_transformer_deploy(struct GaratTransformer *t,
                                          const double *state,
                                          size_t state_len,
                                          const double *action,
                                          size_t action_len,
                                          double *out_action,
                                          size_t out_len);

// Runs a verification suite (`marginals`, `propositions`, `theorem1`,
// `gradients`, `grounding_error`) and returns its JSON report in `out_json`
// (free with `garat_string_free`) and whether it passed in `passed`.
//
// # Safety
// `suite` must be NUL-terminated; out-pointers must be writable.
enum GaratStatus garat_verify(const char *suite, bool *passed, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GARAT_H */
