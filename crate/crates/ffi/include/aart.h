#ifndef AART_H
#define AART_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AartStatus {
    AART_STATUS_OK = 0,
    AART_STATUS_NULL_POINTER = 1,
    AART_STATUS_INVALID_ARGUMENT = 2,
    AART_STATUS_IO = 3,
    AART_STATUS_PARSE = 4,
    AART_STATUS_SHAPE = 5,
    AART_STATUS_NON_FINITE = 6,
    AART_STATUS_EMPTY = 7,
    AART_STATUS_PANIC = 8,
} AartStatus;

// Dataset handle.
typedef struct AartDataset AartDataset;

// Model handle: architecture plus weights.
typedef struct AartModel AartModel;

typedef struct AartSyntheticSpec {
    size_t num_classes;
    size_t video_dim;
    size_t audio_dim;
    size_t min_frames;
    size_t max_frames;
    size_t num_videos;
    size_t min_labels;
    size_t max_labels;
    float noise_std;
    float motif_std;
    size_t motif_length;
    uint64_t seed;
} AartSyntheticSpec;

typedef struct AartMetrics {
    double gap;
    double perr;
    double hit_at_1;
} AartMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *aart_version(void);

// Message of the last failure on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *aart_last_error_message(void);

struct AartSyntheticSpec aart_synthetic_spec_default(void);

// # Safety
// `spec` must point to a valid spec and `out` to writable storage.
enum AartStatus aart_dataset_generate(const struct AartSyntheticSpec *spec,
                                      struct AartDataset **out);

// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum AartStatus aart_dataset_read(const char *path, struct AartDataset **out);

// # Safety
// `ds` must be a live handle and `path` a NUL-terminated string.
enum AartStatus aart_dataset_write(const struct AartDataset *ds, const char *path);

// Number of videos, classes and per-frame feature sizes.
//
// # Safety
// `ds` must be a live handle; each out pointer may be NULL to skip it.
enum AartStatus aart_dataset_dims(const struct AartDataset *ds,
                                  size_t *num_videos,
                                  size_t *num_classes,
                                  size_t *video_dim,
                                  size_t *audio_dim);

// Frame count of video `index`.
//
// # Safety
// `ds` must be a live handle and `frames` writable.
enum AartStatus aart_dataset_frames(const struct AartDataset *ds, size_t index, size_t *frames);

// Copies video `index` into caller buffers: `frames * video_dim` video
// features, `frames * audio_dim` audio features and the `num_classes`
// multi-hot label vector, all row-major.
//
// # Safety
// Buffers must hold the stated number of floats.
enum AartStatus aart_dataset_example(const struct AartDataset *ds,
                                     size_t index,
                                     float *video,
                                     size_t video_len,
                                     float *audio,
                                     size_t audio_len,
                                     float *labels,
                                     size_t labels_len);

// Seeded train/val/test split; three new handles are returned.
//
// # Safety
// `ds` must be a live handle, `fractions` three doubles, outs writable.
enum AartStatus aart_dataset_split(const struct AartDataset *ds,
                                   const double *fractions,
                                   uint64_t seed,
                                   struct AartDataset **train_out,
                                   struct AartDataset **val_out,
                                   struct AartDataset **test_out);

// # Safety
// `ds` must come from this library and not be used afterwards. NULL is a no-op.
void aart_dataset_free(struct AartDataset *ds);

// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum AartStatus aart_model_load(const char *path, struct AartModel **out);

// # Safety
// `m` must be a live handle and `path` a NUL-terminated string.
enum AartStatus aart_model_save(const struct AartModel *m, const char *path);

// # Safety
// `m` must be a live handle; each out pointer may be NULL to skip it.
enum AartStatus aart_model_dims(const struct AartModel *m,
                                size_t *num_classes,
                                size_t *video_dim,
                                size_t *audio_dim,
                                size_t *max_frames);

// Trains a model on `train_set`, early-stopping on `val_set`. `config` is
// optional `key = value` text with the same keys as the CLI config file.
//
// # Safety
// Handles must be live; `config` NULL or NUL-terminated; `out` writable.
enum AartStatus aart_train(const struct AartDataset *train_set,
                           const struct AartDataset *val_set,
                           const char *config,
                           struct AartModel **out);

// # Safety
// `m` must come from this library and not be used afterwards. NULL is a no-op.
void aart_model_free(struct AartModel *m);

// Class probabilities of one video. `video` holds `frames * video_dim`
// floats, `audio` holds `frames * audio_dim`, `probs` receives
// `num_classes`.
//
// # Safety
// Buffers must hold the stated number of floats.
enum AartStatus aart_model_forward(const struct AartModel *m,
                                   const float *video,
                                   const float *audio,
                                   size_t frames,
                                   float *probs,
                                   size_t probs_len);

// FGSM perturbation of one video against the model: each modality's
// perturbation has L2 norm `epsilon` unless its loss gradient vanishes.
//
// # Safety
// Buffers must hold `frames * dim` floats per modality and `num_classes`
// labels.
enum AartStatus aart_fgsm(const struct AartModel *m,
                          const float *video,
                          const float *audio,
                          size_t frames,
                          const float *labels,
                          float epsilon,
                          float *r_video,
                          float *r_audio);

// GAP, PERR and Hit@1 of the model on `ds`, FGSM-perturbed at `epsilon`
// when it is positive.
//
// # Safety
// Handles must be live and `out` writable.
enum AartStatus aart_evaluate(const struct AartModel *m,
                              const struct AartDataset *ds,
                              float epsilon,
                              struct AartMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AART_H */
