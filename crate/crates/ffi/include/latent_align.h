#ifndef LATENT_ALIGN_H
#define LATENT_ALIGN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

/*
 Result codes.
 */
typedef enum LaStatus {
  LA_STATUS_OK = 0,
  LA_STATUS_NULL_POINTER = 1,
  LA_STATUS_INVALID_ARGUMENT = 2,
  LA_STATUS_IO = 3,
  LA_STATUS_PARSE = 4,
  LA_STATUS_CHECKPOINT = 5,
  LA_STATUS_BUFFER_TOO_SMALL = 6,
  LA_STATUS_PANIC = 7,
} LaStatus;

/*
 A loaded CTC or Imputer model. Read-only after loading, so one handle may
 serve concurrent decodes.
 */
typedef struct LaModel LaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failure on this thread; empty if none.
 */
const char *la_last_error(void);

/*
 Library version as a static string.
 */
const char *la_version(void);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void la_string_free(char *s);

/*
 Loads a CTC or Imputer checkpoint into `*out`.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum LaStatus la_model_load(const char *path, struct LaModel **out);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` must come from [`la_model_load`] and not have been freed.
 */
void la_model_free(struct LaModel *model);

/*
 Lattice width `|V| + 1` of a loaded model, or 0 for null.

 # Safety
 `model` must be null or a live handle.
 */
size_t la_model_width(const struct LaModel *model);

/*
 Decodes one space-separated source sentence with `steps`-step top-k
 decoding and stores the space-separated output in `*out`.

 # Safety
 `model` must be a live handle, `source` a NUL-terminated string and
 `out` writable.
 */
enum LaStatus la_model_decode(const struct LaModel *model,
                              const char *source,
                              size_t steps,
                              char **out);

/*
 CTC negative log-likelihood of `target` under a row-major `rows x cols`
 score lattice (unnormalized; a softmax is applied per row). Writes the
 loss to `*nll_out` (+infinity if no alignment exists) and, when
 `grad_out` is not null, `rows * cols` score gradients.

 # Safety
 Buffers must hold the stated number of elements.
 */
enum LaStatus la_ctc_loss(const double *scores,
                          size_t rows,
                          size_t cols,
                          const size_t *target,
                          size_t target_len,
                          double *nll_out,
                          double *grad_out);

/*
 Imputer loss: like [`la_ctc_loss`] but restricted to alignments that
 agree with `partial` (`rows` entries; negative = MASK) at observed frames.

 # Safety
 Buffers must hold the stated number of elements.
 */
enum LaStatus la_imputer_loss(const double *scores,
                              size_t rows,
                              size_t cols,
                              const size_t *target,
                              size_t target_len,
                              const int64_t *partial,
                              double *nll_out,
                              double *grad_out);

/*
 Collapses an alignment (merge repeats, then drop BLANK). Writes up to
 `out_cap` ids to `out` and the full length to `*out_len`; returns
 `LA_STATUS_BUFFER_TOO_SMALL` if `out_cap` is short.

 # Safety
 `frames` must hold `len` ids and `out` `out_cap` slots.
 */
enum LaStatus la_collapse(const size_t *frames,
                          size_t len,
                          size_t *out,
                          size_t out_cap,
                          size_t *out_len);

/*
 Corpus BLEU-4 in `[0, 100]`. Each corpus is `count` sequences stored
 back to back in `*_ids` with lengths in `*_lens`.

 # Safety
 Buffers must hold the stated number of elements.
 */
enum LaStatus la_bleu(const size_t *hyp_ids,
                      const size_t *hyp_lens,
                      const size_t *ref_ids,
                      const size_t *ref_lens,
                      size_t count,
                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LATENT_ALIGN_H */
