#ifndef MOE_FORGE_H
#define MOE_FORGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Anytime policies; `LearnedGate` needs a model with an exit gate.
typedef enum MoePolicy {
  MOE_POLICY_ALPHA_THRESHOLD = 0,
  MOE_POLICY_BASE_CONFIDENCE = 1,
  MOE_POLICY_GATE_CONFIDENCE = 2,
  MOE_POLICY_LEARNED_GATE = 3,
} MoePolicy;

typedef enum MoeStatus {
  MOE_STATUS_OK = 0,
  MOE_STATUS_NULL_POINTER = 1,
  MOE_STATUS_INVALID_ARGUMENT = 2,
  MOE_STATUS_BUFFER_TOO_SMALL = 3,
  MOE_STATUS_IO = 4,
  MOE_STATUS_INVALID_MODEL = 5,
  MOE_STATUS_VERSION_MISMATCH = 6,
  MOE_STATUS_PANIC = 7,
  MOE_STATUS_INTERNAL = 8,
} MoeStatus;

// Opaque model handle.
typedef struct MoeModel MoeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *moe_version(void);

// Message of the last failed call on this thread, or null. Valid until
// the next call on the same thread.
const char *moe_last_error(void);

// Loads a checkpoint from `path` into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum MoeStatus moe_model_load(const char *path, struct MoeModel **out);

// Parses a checkpoint from a JSON string into `*out`.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum MoeStatus moe_model_from_json(const char *json, struct MoeModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from a load function and not be used afterwards.
void moe_model_free(struct MoeModel *model);

// Input dimension, or 0 for a null model.
//
// # Safety
// `model` must be null or a live handle.
size_t moe_model_input_dim(const struct MoeModel *model);

// Number of classes, or 0 for a null model.
//
// # Safety
// `model` must be null or a live handle.
size_t moe_model_num_classes(const struct MoeModel *model);

// Number of experts, or 0 for a null model.
//
// # Safety
// `model` must be null or a live handle.
size_t moe_model_num_experts(const struct MoeModel *model);

// Writes the gate distribution (K values) into `out`.
//
// # Safety
// `x` must point to `x_len` doubles and `out` to `out_len` doubles.
enum MoeStatus moe_gate_distribution(const struct MoeModel *model,
                                     const double *x,
                                     size_t x_len,
                                     double *out,
                                     size_t out_len);

// Top-1 inference: class probabilities (C values) into `probs` and the
// chosen expert into `*expert` when non-null.
//
// # Safety
// `x` must point to `x_len` doubles, `probs` to `probs_len` doubles and
// `expert` must be null or valid.
enum MoeStatus moe_top1_predict(const struct MoeModel *model,
                                const double *x,
                                size_t x_len,
                                double *probs,
                                size_t probs_len,
                                size_t *expert);

// Anytime inference at threshold `tau`. Writes C probabilities, and when
// non-null, whether the base model answered alone and the MACs spent.
//
// # Safety
// `x` must point to `x_len` doubles, `probs` to `probs_len` doubles;
// `exited` and `macs` must be null or valid.
enum MoeStatus moe_anytime_predict(const struct MoeModel *model,
                                   const double *x,
                                   size_t x_len,
                                   double tau,
                                   enum MoePolicy policy,
                                   double *probs,
                                   size_t probs_len,
                                   bool *exited,
                                   uint64_t *macs);

// Per-expert anytime scores (K values) into `out`.
//
// # Safety
// `x` must point to `x_len` doubles and `out` to `out_len` doubles.
enum MoeStatus moe_alpha_scores(const struct MoeModel *model,
                                const double *x,
                                size_t x_len,
                                double *out,
                                size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOE_FORGE_H */
