#ifndef PRISM_H
#define PRISM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PrismStatus {
  PRISM_STATUS_OK = 0,
  PRISM_STATUS_NULL_POINTER = 1,
  PRISM_STATUS_CONFIG = 2,
  PRISM_STATUS_NUMERICAL = 3,
  PRISM_STATUS_IO = 4,
  PRISM_STATUS_CONTRACT = 5,
  PRISM_STATUS_PANIC = 6,
} PrismStatus;

/**
 * Parsed, validated experiment configuration.
 */
typedef struct PrismConfig PrismConfig;

/**
 * A federation ready to run rounds.
 */
typedef struct PrismFederation PrismFederation;

/**
 * Outcome of one round. `accuracy` and `loss` are NaN when the round was
 * not evaluated.
 */
typedef struct PrismRoundInfo {
  uint64_t round;
  uint32_t clients;
  uint32_t diverged;
  double accuracy;
  double loss;
  double training_seconds;
  double svd_seconds;
} PrismRoundInfo;

typedef struct PrismCost {
  uint64_t params;
  uint64_t macs;
  uint64_t activation_mem;
} PrismCost;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *prism_last_error(void);

const char *prism_version(void);

/**
 * Parses a TOML config (may be empty for defaults).
 */
enum PrismStatus prism_config_parse(const char *toml, struct PrismConfig **out);

/**
 * Applies a `key=value` override, e.g. `fed.rounds=10`. On failure the
 * config is left unchanged.
 */
enum PrismStatus prism_config_set(struct PrismConfig *config, const char *key_value);

void prism_config_free(struct PrismConfig *config);

/**
 * Loads data, partitions it and initializes the server model.
 */
enum PrismStatus prism_federation_new(const struct PrismConfig *config,
                                      struct PrismFederation **out);

/**
 * Runs one round. Running past the configured round count is a contract error.
 */
enum PrismStatus prism_federation_run_round(struct PrismFederation *fed,
                                            struct PrismRoundInfo *info);

/**
 * Rounds completed so far; 0 for a null handle.
 */
uint64_t prism_federation_round(const struct PrismFederation *fed);

bool prism_federation_is_done(const struct PrismFederation *fed);

/**
 * Test accuracy and loss of the current server model.
 */
enum PrismStatus prism_federation_evaluate(const struct PrismFederation *fed,
                                           double *accuracy,
                                           double *loss);

enum PrismStatus prism_federation_save_checkpoint(const struct PrismFederation *fed,
                                                  const char *path);

void prism_federation_free(struct PrismFederation *fed);

/**
 * Cost of one client sub-model. `input` holds C, H, W and is ignored for
 * `resnet18-cifar`. Pass `keep_ratio` 1 with method `fullfedavg` for the
 * unfactorized original model.
 */
enum PrismStatus prism_cost(const char *model,
                            const char *method,
                            double keep_ratio,
                            size_t batch,
                            const size_t *input,
                            size_t num_classes,
                            struct PrismCost *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRISM_H */
