#ifndef FSICSF_H
#define FSICSF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FsicsfStatus {
  FSICSF_STATUS_OK = 0,
  FSICSF_STATUS_NULL_ARGUMENT = 1,
  FSICSF_STATUS_INVALID_UTF8 = 2,
  FSICSF_STATUS_IO = 3,
  FSICSF_STATUS_FORMAT = 4,
  FSICSF_STATUS_CONFIG = 5,
  FSICSF_STATUS_CONTRACT = 6,
  FSICSF_STATUS_SAMPLER = 7,
  FSICSF_STATUS_SHAPE = 8,
  FSICSF_STATUS_GRAD_CHECK = 9,
  FSICSF_STATUS_PANIC = 10,
} FsicsfStatus;

// A trained model with its metadata.
typedef struct FsicsfModel FsicsfModel;

// A seeded episode stream over its own copy of a split.
typedef struct FsicsfSampler FsicsfSampler;

// A data split loaded from a corpus file.
typedef struct FsicsfSplit FsicsfSplit;

// Mean intent accuracy and slot F1 over a set of evaluation episodes.
typedef struct FsicsfScores {
  double ic_accuracy;
  double slot_f1;
  size_t episodes;
} FsicsfScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message on the calling thread, or null after a successful
// call. The pointer stays valid until the next library call on this thread.
const char *fsicsf_last_error(void);

// Releases a string returned by the library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed already.
void fsicsf_string_free(char *s);

// Loads a split file. Slot labels are prefixed with their intent.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum FsicsfStatus fsicsf_split_load(const char *path, struct FsicsfSplit **out);

// # Safety
// `split` must be null or a handle from [`fsicsf_split_load`].
void fsicsf_split_free(struct FsicsfSplit *split);

// Number of utterances in the split, 0 for a null handle.
//
// # Safety
// `split` must be null or a live split handle.
size_t fsicsf_split_len(const struct FsicsfSplit *split);

// Number of intent classes in the split, 0 for a null handle.
//
// # Safety
// `split` must be null or a live split handle.
size_t fsicsf_split_num_classes(const struct FsicsfSplit *split);

// # Safety
// `split` must be a live split handle and `out` a valid pointer.
enum FsicsfStatus fsicsf_sampler_new(const struct FsicsfSplit *split,
                                     size_t k_max,
                                     uint64_t seed,
                                     struct FsicsfSampler **out);

// # Safety
// `sampler` must be null or a handle from [`fsicsf_sampler_new`].
void fsicsf_sampler_free(struct FsicsfSampler *sampler);

// Episode `index` of the stream as one JSON line. The same seed and index
// always give the same episode. Free the result with [`fsicsf_string_free`].
//
// # Safety
// `sampler` must be a live sampler handle and `out` a valid pointer.
enum FsicsfStatus fsicsf_sampler_episode_json(const struct FsicsfSampler *sampler,
                                              uint64_t index,
                                              char **out);

// Loads a checkpoint and its `.meta.json` sidecar. Models trained on
// contextual vectors cannot be loaded through this call.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum FsicsfStatus fsicsf_model_load(const char *path, struct FsicsfModel **out);

// # Safety
// `model` must be null or a handle from [`fsicsf_model_load`].
void fsicsf_model_free(struct FsicsfModel *model);

// Evaluates `model` on `episodes` episodes drawn from `split` with `seed`.
// A `k_max` of 0 uses the budget the model was trained with.
//
// # Safety
// `model` and `split` must be live handles and `out` a valid pointer.
enum FsicsfStatus fsicsf_model_evaluate(const struct FsicsfModel *model,
                                        const struct FsicsfSplit *split,
                                        size_t k_max,
                                        uint64_t seed,
                                        size_t episodes,
                                        struct FsicsfScores *out);

// Checks every differentiable op against central differences and writes the
// largest relative error seen. Fails with `GRAD_CHECK` when it reaches the
// tolerance.
//
// # Safety
// `max_relative_error` must be a valid pointer.
enum FsicsfStatus fsicsf_gradcheck(uint64_t seed, double *max_relative_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FSICSF_H */
