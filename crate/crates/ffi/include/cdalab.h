#ifndef CDALAB_H
#define CDALAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum CdaStatus {
  CDA_STATUS_OK = 0,
  CDA_STATUS_NULL_POINTER = 1,
  CDA_STATUS_INVALID_ARGUMENT = 2,
  CDA_STATUS_INVALID_CONFIGURATION = 3,
  CDA_STATUS_CONTRACT_VIOLATION = 4,
  CDA_STATUS_NUMERICAL_DOMAIN = 5,
  CDA_STATUS_IO = 6,
  CDA_STATUS_UTF8 = 7,
  CDA_STATUS_BUFFER_TOO_SMALL = 8,
  CDA_STATUS_CHECK_FAILED = 9,
  CDA_STATUS_PANIC = 10,
} CdaStatus;

// Prediction rule for `cda_model_predict`.
typedef enum CdaRule {
  // Mean of both content classifiers' softmax outputs.
  CDA_RULE_MEAN = 0,
  // First content classifier only.
  CDA_RULE_FIRST = 1,
} CdaRule;

// Opaque run configuration.
typedef struct CdaConfig CdaConfig;

// Opaque trained model.
typedef struct CdaModelHandle CdaModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cda_version(void);

// Copies the last error message of this thread into `buf`.
enum CdaStatus cda_last_error(char *buf, size_t cap, size_t *needed);

// Creates a configuration holding the defaults.
enum CdaStatus cda_config_new(struct CdaConfig **out);

// Loads a JSON configuration file.
enum CdaStatus cda_config_load(const char *path, struct CdaConfig **out);

// Sets a dotted key such as `train.steps` to a JSON (or bare string) value.
enum CdaStatus cda_config_set(struct CdaConfig *cfg, const char *key, const char *value);

// Serializes the configuration as JSON into `buf`.
enum CdaStatus cda_config_to_json(const struct CdaConfig *cfg,
                                  char *buf,
                                  size_t cap,
                                  size_t *needed);

void cda_config_free(struct CdaConfig *cfg);

// Writes the dataset directory named by the configuration.
enum CdaStatus cda_generate(const struct CdaConfig *cfg);

// Trains on the configured dataset directory and fills the run directory.
enum CdaStatus cda_train(const struct CdaConfig *cfg);

// Loads a model from a checkpoint file.
enum CdaStatus cda_model_load(const char *path, struct CdaModelHandle **out);

void cda_model_free(struct CdaModelHandle *model);

// Input width and class count of a loaded model.
enum CdaStatus cda_model_shape(const struct CdaModelHandle *model,
                               size_t *input_dim,
                               size_t *num_classes);

// Predicts a class per row of the row-major `rows x cols` matrix `x`.
// `labels` must hold `rows` entries.
enum CdaStatus cda_model_predict(const struct CdaModelHandle *model,
                                 const double *x,
                                 size_t rows,
                                 size_t cols,
                                 enum CdaRule rule,
                                 uint32_t *labels);

// Class probabilities, row-major `rows x num_classes`, written to `probs`
// which must hold `cap` doubles.
enum CdaStatus cda_model_predict_proba(const struct CdaModelHandle *model,
                                       const double *x,
                                       size_t rows,
                                       size_t cols,
                                       enum CdaRule rule,
                                       double *probs,
                                       size_t cap);

// Jensen-Shannon divergence (natural log) of two histograms of length `n`.
// Inputs must be nonnegative and sum to 1.
enum CdaStatus cda_js_divergence(const double *p, const double *q, size_t n, double *out);

// Runs the divergence identity suite. Returns `CheckFailed` if any check
// misses its tolerance.
enum CdaStatus cda_theory_check(uint64_t seed, size_t trials, size_t resolution, double tol);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDALAB_H */
