/* scopevit C ABI */

#ifndef SCOPEVIT_H
#define SCOPEVIT_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Success.
 */
#define SVT_OK 0

/**
 * Null pointer, malformed UTF-8 or otherwise unusable argument.
 */
#define SVT_ERR_INVALID_ARGUMENT 1

/**
 * Domain failure (config validation, leakage gate, io, bad checkpoint...).
 */
#define SVT_ERR_RUNTIME 2

/**
 * Opaque checkpoint handle.
 */
typedef struct SvtCheckpoint SvtCheckpoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the thread-local error message into `buf` (NUL-terminated,
 * truncating) and return the full message length in bytes, excluding the
 * terminator. `buf` may be null to query the length.
 */
uintptr_t svt_last_error(char *buf, uintptr_t cap);

/**
 * Static library version string.
 */
const char *svt_version(void);

/**
 * Generate the procedural corpus under `out_dir`.
 *
 * `config_toml` may be null for defaults or hold a corpus config document.
 */
int32_t svt_synth_generate(const char *config_toml, const char *out_dir);

/**
 * Open a checkpoint file; on success `*out` owns the handle.
 */
int32_t svt_checkpoint_open(const char *path, struct SvtCheckpoint **out);

/**
 * Release a checkpoint handle; accepts null.
 */
void svt_checkpoint_free(struct SvtCheckpoint *ck);

/**
 * Checkpoint kind ("mae", "triplet", ...) into `buf`; returns the full
 * length like [`svt_last_error`]. A null handle returns 0.
 */
uintptr_t svt_checkpoint_kind(const struct SvtCheckpoint *ck, char *buf, uintptr_t cap);

/**
 * Number of tensors in the checkpoint.
 */
int32_t svt_checkpoint_tensor_count(const struct SvtCheckpoint *ck, uintptr_t *out);

/**
 * Name of tensor `index` (canonical order) into `buf`; returns the name
 * length, or 0 when the index is out of range.
 */
uintptr_t svt_checkpoint_tensor_name(const struct SvtCheckpoint *ck,
                                     uintptr_t index,
                                     char *buf,
                                     uintptr_t cap);

/**
 * Dimensions of a named tensor. Writes up to `max_dims` entries and stores
 * the tensor's rank in `*rank_out`.
 */
int32_t svt_checkpoint_tensor_dims(const struct SvtCheckpoint *ck,
                                   const char *name,
                                   uint64_t *dims_out,
                                   uintptr_t max_dims,
                                   uintptr_t *rank_out);

/**
 * Masked-reconstruction pretraining.
 *
 * `exclude_manifest` (nullable) names a manifest whose val/test videos
 * must not appear in the pretraining manifest; overlap aborts the run.
 * Writes `checkpoint.bin` under `out_dir`.
 */
int32_t svt_pretrain(const char *config_toml,
                     const char *manifest_path,
                     const char *corpus_dir,
                     const char *exclude_manifest,
                     const char *out_dir);

/**
 * Downstream finetuning; `task` is "triplet", "phase-stage1" or
 * "phase-stage2", `init_checkpoint` may be null for random init. Writes
 * `checkpoint.bin` under `out_dir`.
 */
int32_t svt_finetune(const char *config_toml,
                     const char *task,
                     const char *manifest_path,
                     const char *corpus_dir,
                     const char *init_checkpoint,
                     const char *out_dir);

/**
 * Evaluate a checkpoint on a manifest's test split; the metric's
 * cross-seed mean lands in `*metric_out`.
 */
int32_t svt_evaluate(const struct SvtCheckpoint *ck,
                     const char *manifest_path,
                     const char *corpus_dir,
                     uintptr_t batch,
                     double *metric_out);

/**
 * Render a reconstruction grid (one row per frame, seeded masking) to
 * `out_png`, with raw losses in a `.losses.tsv` sidecar.
 */
int32_t svt_render_recon(const struct SvtCheckpoint *ck,
                         const char *manifest_path,
                         const char *corpus_dir,
                         const char *out_png,
                         uintptr_t frame_count,
                         uint64_t mask_seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCOPEVIT_H */
