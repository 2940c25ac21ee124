#ifndef PREPO_H
#define PREPO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  PREPO_STATUS_OK = 0,
  PREPO_STATUS_NULL_POINTER = 1,
  PREPO_STATUS_INVALID_ARGUMENT = 2,
  PREPO_STATUS_OUT_OF_RANGE = 3,
  PREPO_STATUS_UNDEFINED = 4,
  PREPO_STATUS_IO = 5,
  PREPO_STATUS_PARSE = 6,
  PREPO_STATUS_MISSING = 7,
  PREPO_STATUS_PANIC = 8,
} PrepoStatus;

typedef enum {
  PREPO_ENTROPY_MODE_TOKEN_WEIGHTED = 0,
  PREPO_ENTROPY_MODE_SEQUENCE_MEAN = 1,
} PrepoEntropyMode;

typedef enum {
  PREPO_PACING_LINEAR = 0,
  PREPO_PACING_QUADRATIC = 1,
  PREPO_PACING_EXPONENTIAL = 2,
} PrepoPacing;

/**
 * Opaque policy handle.
 */
typedef struct PrepoPolicy PrepoPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *prepo_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *prepo_version(void);

/**
 * Creates a randomly initialized policy for the arithmetic vocabulary with
 * the given modulus.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
PrepoStatus prepo_policy_new(uint32_t modulus,
                             uint64_t seed,
                             double output_scale,
                             PrepoPolicy **out);

/**
 * Loads a policy checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
PrepoStatus prepo_policy_load(const char *path, PrepoPolicy **out);

/**
 * Writes a policy checkpoint.
 *
 * # Safety
 * `policy` must come from this library; `path` must be NUL-terminated.
 */
PrepoStatus prepo_policy_save(const PrepoPolicy *policy, const char *path);

/**
 * Releases a policy handle. Null is ignored.
 *
 * # Safety
 * `policy` must come from this library and not be used afterwards.
 */
void prepo_policy_free(PrepoPolicy *policy);

/**
 * Vocabulary size the policy was built for.
 *
 * # Safety
 * `policy` must come from this library; `out` must be writable.
 */
PrepoStatus prepo_policy_vocab_size(const PrepoPolicy *policy, size_t *out);

/**
 * Teacher-forced perplexity of a prompt of `len` token ids.
 *
 * # Safety
 * `tokens` must point to `len` readable ids; `out` must be writable.
 */
PrepoStatus prepo_policy_prompt_ppl(const PrepoPolicy *policy,
                                    const uint32_t *tokens,
                                    size_t len,
                                    double *out);

/**
 * Relative-entropy weights for `n_rollouts` rollouts. `token_entropies`
 * holds every rollout's per-token entropies back to back; `lengths[i]` is
 * the token count of rollout `i`. Writes `n_rollouts` weights and whether
 * the batch was degenerate (all weights set to 1).
 *
 * # Safety
 * Array pointers must be valid for the stated lengths.
 */
PrepoStatus prepo_relative_weights(const double *token_entropies,
                                   const size_t *lengths,
                                   size_t n_rollouts,
                                   PrepoEntropyMode mode,
                                   double *out_weights,
                                   bool *out_degenerate);

/**
 * Group-standardized advantages (population std). `out_zero` is set when
 * the rewards have zero spread and all advantages are 0.
 *
 * # Safety
 * `rewards` and `out_advantages` must be valid for `n` elements.
 */
PrepoStatus prepo_group_advantage(const double *rewards,
                                  size_t n,
                                  double *out_advantages,
                                  bool *out_zero);

/**
 * Start of the selection window for progress `rho` over `batch_size`
 * candidates and `k` selected prompts.
 *
 * # Safety
 * `out` must be writable.
 */
PrepoStatus prepo_window_start(double rho,
                               size_t batch_size,
                               size_t k,
                               PrepoPacing pace,
                               size_t *out);

/**
 * Selects `k` of `n` scored prompts: sorts by ascending score (ties by
 * ascending id) and takes the window at progress `rho`. Writes `k` ids in
 * sorted order and, if non-null, the window start.
 *
 * # Safety
 * `ids` and `scores` must be valid for `n` elements, `out_ids` for `k`.
 */
PrepoStatus prepo_select_window(const size_t *ids,
                                const double *scores,
                                size_t n,
                                double rho,
                                size_t k,
                                PrepoPacing pace,
                                size_t *out_ids,
                                size_t *out_start);

/**
 * Spearman rank correlation with average ranks for ties and a two-sided
 * t-approximation p-value.
 *
 * # Safety
 * `x` and `y` must be valid for `n` elements; outputs must be writable.
 */
PrepoStatus prepo_spearman(const double *x,
                           const double *y,
                           size_t n,
                           double *out_rho,
                           double *out_p_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PREPO_H */
