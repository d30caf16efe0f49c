#ifndef SMCGFN_H
#define SMCGFN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every exported function.
 */
typedef enum SmcgfnStatus {
  SMCGFN_STATUS_OK = 0,
  SMCGFN_STATUS_NULL_POINTER = 1,
  SMCGFN_STATUS_INVALID_ARGUMENT = 2,
  SMCGFN_STATUS_CONFIG = 3,
  SMCGFN_STATUS_CAPABILITY = 4,
  SMCGFN_STATUS_PARSE = 5,
  SMCGFN_STATUS_VERSION = 6,
  SMCGFN_STATUS_IO = 7,
  SMCGFN_STATUS_TRAINING = 8,
  SMCGFN_STATUS_DEGENERATE_WEIGHTS = 9,
  SMCGFN_STATUS_BUFFER_TOO_SMALL = 10,
  SMCGFN_STATUS_PANIC = 11,
} SmcgfnStatus;

/**
 * Opaque training session.
 */
typedef struct SmcgfnTrainer SmcgfnTrainer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *smcgfn_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *smcgfn_version(void);

/**
 * Creates a trainer from a JSON configuration; `seed` overrides its seed.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SmcgfnStatus smcgfn_trainer_new(const char *config_json,
                                     uint64_t seed,
                                     struct SmcgfnTrainer **out);

/**
 * Restores a trainer from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SmcgfnStatus smcgfn_trainer_load(const char *path, struct SmcgfnTrainer **out);

/**
 * Releases a trainer. Null is ignored.
 *
 * # Safety
 * `trainer` must come from this library and not have been freed.
 */
void smcgfn_trainer_free(struct SmcgfnTrainer *trainer);

/**
 * Runs `epochs` training epochs.
 *
 * # Safety
 * `trainer` must be a live handle.
 */
enum SmcgfnStatus smcgfn_trainer_step(struct SmcgfnTrainer *trainer, uint64_t epochs);

/**
 * Writes the number of completed epochs and the current `log Z_theta`.
 *
 * # Safety
 * `trainer` must be a live handle; the output pointers must be valid or null.
 */
enum SmcgfnStatus smcgfn_trainer_status(const struct SmcgfnTrainer *trainer,
                                        uint64_t *epoch,
                                        double *log_z);

/**
 * Saves a checkpoint to `path`.
 *
 * # Safety
 * `trainer` must be a live handle and `path` a NUL-terminated string.
 */
enum SmcgfnStatus smcgfn_trainer_save(const struct SmcgfnTrainer *trainer, const char *path);

/**
 * Draws `n` samples of a continuous sampler into `out` (row-major, `n x dim`)
 * with their log-weights in `log_w` (length `n`, may be null). `dim` receives
 * the state dimension; when `out_len < n * dim` nothing is written and
 * `BufferTooSmall` is returned.
 *
 * # Safety
 * `trainer` must be a live handle; `out` must hold `out_len` doubles and
 * `log_w`, when non-null, `n` doubles.
 */
enum SmcgfnStatus smcgfn_trainer_sample(const struct SmcgfnTrainer *trainer,
                                        size_t n,
                                        uint64_t seed,
                                        double *out,
                                        size_t out_len,
                                        double *log_w,
                                        size_t *dim);

/**
 * Exact `log Z` of a prepend/append environment by enumeration.
 *
 * # Safety
 * `vocab` and `reward` must be NUL-terminated strings and `log_z` valid.
 */
enum SmcgfnStatus smcgfn_enumerate_log_z(const char *vocab,
                                         size_t len,
                                         const char *reward,
                                         double *log_z);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SMCGFN_H */
