#ifndef CAW_H
#define CAW_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum CawStatus {
  CAW_STATUS_OK = 0,
  CAW_STATUS_NULL_POINTER = 1,
  CAW_STATUS_INVALID_ARGUMENT = 2,
  CAW_STATUS_DIMENSION = 3,
  CAW_STATUS_DOMAIN = 4,
  CAW_STATUS_CONTRACT = 5,
  CAW_STATUS_NUMERIC = 6,
  CAW_STATUS_IO = 7,
  CAW_STATUS_FORMAT = 8,
  CAW_STATUS_PANIC = 9,
} CawStatus;

// Opaque dataset handle.
typedef struct CawDataset CawDataset;

// Opaque model handle.
typedef struct CawModel CawModel;

// Loss values for one batch.
typedef struct CawLossBreakdown {
  double ce;
  double ca;
  double reg;
  double total;
  double mean_weight;
} CawLossBreakdown;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or `NULL` after a
// successful one. Valid until the next call into the library.
const char *caw_last_error_message(void);

// Static, human-readable name of a status code.
const char *caw_status_name(enum CawStatus status);

// Generates a synthetic dataset from a JSON spec (`NULL` for the default).
//
// # Safety
// `spec_json` is `NULL` or a nul-terminated string; `out` is writable.
enum CawStatus caw_dataset_generate(const char *spec_json, struct CawDataset **out);

// # Safety
// `path` is a nul-terminated string; `out` is writable.
enum CawStatus caw_dataset_load(const char *path, struct CawDataset **out);

// # Safety
// `dataset` is a live handle; `path` is a nul-terminated string.
enum CawStatus caw_dataset_save(const struct CawDataset *dataset, const char *path);

// Sample count, or 0 for `NULL`.
//
// # Safety
// `dataset` is `NULL` or a live handle.
size_t caw_dataset_len(const struct CawDataset *dataset);

// # Safety
// `dataset` is `NULL` or a live handle.
size_t caw_dataset_input_dim(const struct CawDataset *dataset);

// # Safety
// `dataset` is `NULL` or a live handle.
size_t caw_dataset_classes(const struct CawDataset *dataset);

// Copies the row-major inputs (`len * input_dim` values) and the labels
// (`len` values). Either output may be `NULL` to skip it.
//
// # Safety
// Non-null outputs hold at least the stated number of elements.
enum CawStatus caw_dataset_copy(const struct CawDataset *dataset,
                                double *out_x,
                                size_t x_len,
                                size_t *out_labels,
                                size_t labels_len);

// # Safety
// `dataset` is `NULL` or a handle not yet freed.
void caw_dataset_free(struct CawDataset *dataset);

// Seeded MLP encoder mapping the dataset's inputs into its prototype space,
// classifying against the dataset's prototypes at temperature `temperature`.
//
// # Safety
// `dataset` is a live handle; `out` is writable.
enum CawStatus caw_model_new(const struct CawDataset *dataset,
                             size_t hidden_dim,
                             size_t hidden_layers,
                             double temperature,
                             uint64_t seed,
                             struct CawModel **out);

// # Safety
// `path` is a nul-terminated string; `out` is writable.
enum CawStatus caw_model_load(const char *path, struct CawModel **out);

// Writes a checkpoint holding the model only.
//
// # Safety
// `model` is a live handle; `path` is a nul-terminated string.
enum CawStatus caw_model_save(const struct CawModel *model, const char *path);

// Copies the tuned encoder into the frozen slot.
//
// # Safety
// `model` is a live handle.
enum CawStatus caw_model_snapshot(struct CawModel *model, bool force);

// Clean cross-entropy training; `train_json` is a training config whose
// loss weights and inner attack are ignored.
//
// # Safety
// Handles are live; `train_json` is `NULL` or a nul-terminated string.
enum CawStatus caw_model_pretrain(struct CawModel *model,
                                  const struct CawDataset *dataset,
                                  const char *train_json);

// Adversarial fine-tuning. Requires a prior snapshot. `out_steps` may be
// `NULL`.
//
// # Safety
// Handles are live; `train_json` is `NULL` or a nul-terminated string.
enum CawStatus caw_model_fit(struct CawModel *model,
                             const struct CawDataset *dataset,
                             const char *train_json,
                             uint64_t *out_steps);

// Arg-max class of each of `rows` inputs.
//
// # Safety
// `x` holds `rows * cols` values and `out_labels` holds `rows`.
enum CawStatus caw_model_predict(const struct CawModel *model,
                                 const double *x,
                                 size_t rows,
                                 size_t cols,
                                 size_t *out_labels);

// Writes the 64-character hex digest plus a nul terminator.
//
// # Safety
// `buf` holds `cap` bytes.
enum CawStatus caw_model_digest(const struct CawModel *model, char *buf, size_t cap);

// # Safety
// `model` is `NULL` or a handle not yet freed.
void caw_model_free(struct CawModel *model);

// Runs the attack described by `attack_json` (`NULL` for the default) on
// a batch. `out_x_adv` receives `rows * cols` values; `out_success` may be
// `NULL`, otherwise it receives `rows` flags.
//
// # Safety
// Buffers hold the stated number of elements.
enum CawStatus caw_attack(const struct CawModel *model,
                          const double *x,
                          size_t rows,
                          size_t cols,
                          const size_t *labels,
                          const char *attack_json,
                          double *out_x_adv,
                          bool *out_success);

// Training objective on a clean batch and its adversarial counterpart.
//
// # Safety
// `x` and `x_adv` hold `rows * cols` values, `labels` holds `rows`.
enum CawStatus caw_total_loss(const struct CawModel *model,
                              const double *x,
                              const double *x_adv,
                              size_t rows,
                              size_t cols,
                              const size_t *labels,
                              const char *loss_json,
                              struct CawLossBreakdown *out);

// Clean accuracy and one robust accuracy per attack in `attacks_json`, a
// JSON array (`NULL` for none). `robust_len` must equal the array length.
//
// # Safety
// Handles are live; `out_robust` holds `robust_len` values.
enum CawStatus caw_evaluate(const struct CawModel *model,
                            const struct CawDataset *dataset,
                            const char *attacks_json,
                            size_t batch_size,
                            double *out_clean,
                            double *out_robust,
                            size_t robust_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAW_H */
