#ifndef VIVO_H
#define VIVO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VivoStatus {
  VIVO_STATUS_OK = 0,
  VIVO_STATUS_NULL_ARGUMENT = 1,
  VIVO_STATUS_INVALID_ARGUMENT = 2,
  VIVO_STATUS_IO = 3,
  VIVO_STATUS_DATA = 4,
  VIVO_STATUS_PANIC = 5,
} VivoStatus;

/**
 * Loaded model: parameters, vocabulary and input layout.
 */
typedef struct VivoModel VivoModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint. When `vocab_path` is null, `vocab.txt` next to the
 * checkpoint is used. On success `*out` owns a model to be released with
 * [`vivo_model_free`].
 *
 * # Safety
 * Paths are NUL-terminated strings; `out` is writable.
 */
enum VivoStatus vivo_model_load(const char *checkpoint_path,
                                const char *vocab_path,
                                struct VivoModel **out);

/**
 * # Safety
 * `model` is null or came from [`vivo_model_load`] and is not used again.
 */
void vivo_model_free(struct VivoModel *model);

/**
 * Vocabulary size, or 0 for a null model.
 *
 * # Safety
 * `model` is null or a live model.
 */
size_t vivo_model_vocab_size(const struct VivoModel *model);

/**
 * Appearance features expected per region, or 0 for a null model.
 *
 * # Safety
 * `model` is null or a live model.
 */
size_t vivo_model_region_features(const struct VivoModel *model);

/**
 * Number of scalar parameters, or 0 for a null model.
 *
 * # Safety
 * `model` is null or a live model.
 */
size_t vivo_model_num_parameters(const struct VivoModel *model);

/**
 * Captions one image given as a JSON object with `image_size`, `regions`
 * and `tags` (the same layout as a line of the tag corpus).
 *
 * `beam_width` 0 selects greedy decoding; otherwise constrained beam search
 * runs with that width, requiring every tag when `require_tags` is set.
 * `*out_caption` receives a string for [`vivo_string_free`]; `out_logprob`
 * may be null.
 *
 * # Safety
 * `model` is a live model, `record_json` a NUL-terminated string,
 * `out_caption` writable and `out_logprob` null or writable.
 */
enum VivoStatus vivo_caption(const struct VivoModel *model,
                             const char *record_json,
                             size_t max_len,
                             size_t beam_width,
                             bool require_tags,
                             char **out_caption,
                             double *out_logprob);

/**
 * Minimum-cost assignment of an `n x n` row-major cost matrix.
 * `perm_out[i]` receives the column assigned to row `i`.
 *
 * # Safety
 * `cost` holds `n * n` values, `perm_out` room for `n`, and `total_out` is
 * null or writable.
 */
enum VivoStatus vivo_hungarian(const double *cost, size_t n, size_t *perm_out, double *total_out);

/**
 * # Safety
 * `s` is null or a string returned by this library, not yet freed.
 */
void vivo_string_free(char *s);

/**
 * Description of the last failure on this thread; empty after a success.
 * Valid until the next call into the library on the same thread.
 */
const char *vivo_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIVO_H */
