#ifndef ROSETTA_H
#define ROSETTA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RosettaStatus {
  ROSETTA_STATUS_OK = 0,
  ROSETTA_STATUS_NULL_POINTER = 1,
  ROSETTA_STATUS_INVALID_UTF8 = 2,
  ROSETTA_STATUS_IO = 3,
  ROSETTA_STATUS_BAD_MAGIC = 4,
  ROSETTA_STATUS_UNSUPPORTED_VERSION = 5,
  ROSETTA_STATUS_CHECKSUM = 6,
  ROSETTA_STATUS_MALFORMED = 7,
  ROSETTA_STATUS_UNKNOWN_TASK = 8,
  ROSETTA_STATUS_INVALID_ARGUMENT = 9,
  ROSETTA_STATUS_CONFIG = 10,
  ROSETTA_STATUS_BUFFER_TOO_SMALL = 11,
  ROSETTA_STATUS_PANIC = 12,
} RosettaStatus;

/**
 * A loaded memory bank.
 */
typedef struct RosettaBank RosettaBank;

/**
 * A memory bank together with the trunk it was trained on.
 */
typedef struct RosettaModel RosettaModel;

/**
 * Four-way channel occupancy of two tasks, as fractions of all channels.
 */
typedef struct RosettaOccupancy {
  double only_a;
  double overlap;
  double only_b;
  double unused;
} RosettaOccupancy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *rosetta_last_error(void);

/**
 * Static name of a status code.
 */
const char *rosetta_status_name(enum RosettaStatus status);

/**
 * Loads a bank file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum RosettaStatus rosetta_bank_load(const char *path, struct RosettaBank **out);

/**
 * # Safety
 * `bank` must be null or a handle from [`rosetta_bank_load`] not yet freed.
 */
void rosetta_bank_free(struct RosettaBank *bank);

/**
 * # Safety
 * `bank` must be a live handle and `out` writable.
 */
enum RosettaStatus rosetta_bank_task_count(const struct RosettaBank *bank, size_t *out);

/**
 * Id of the task committed at position `index`.
 *
 * # Safety
 * `bank` must be a live handle and `out` writable.
 */
enum RosettaStatus rosetta_bank_task_id(const struct RosettaBank *bank,
                                        size_t index,
                                        uint32_t *out);

/**
 * Aggregate channel occupancy of tasks `a` and `b`.
 *
 * # Safety
 * `bank` must be a live handle and `out` writable.
 */
enum RosettaStatus rosetta_gate_stats(const struct RosettaBank *bank,
                                      uint32_t a,
                                      uint32_t b,
                                      struct RosettaOccupancy *out);

/**
 * Controller weight from a cross-task and an intra-task correlation.
 *
 * # Safety
 * `out` must be writable.
 */
enum RosettaStatus rosetta_gdc_weight(double r_nm, double r_mm, double *out);

/**
 * Loads a bank and its trunk checkpoint for inference.
 *
 * # Safety
 * Both paths must be NUL-terminated strings and `out` writable.
 */
enum RosettaStatus rosetta_model_load(const char *bank_path,
                                      const char *net_path,
                                      struct RosettaModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`rosetta_model_load`] not yet freed.
 */
void rosetta_model_free(struct RosettaModel *model);

/**
 * Width of the input rows the model expects.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum RosettaStatus rosetta_model_input_dim(const struct RosettaModel *model, size_t *out);

/**
 * Number of classes, and so logits per row, of a stored task.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum RosettaStatus rosetta_model_num_classes(const struct RosettaModel *model,
                                             uint32_t task,
                                             size_t *out);

/**
 * Logits of `rows` row-major input rows under task `task`'s stored gates.
 * `logits` must hold `rows * num_classes` values; `logits_len` is its
 * capacity.
 *
 * # Safety
 * `inputs` must point to `rows * cols` readable doubles and `logits` to
 * `logits_len` writable doubles.
 */
enum RosettaStatus rosetta_model_infer(const struct RosettaModel *model,
                                       uint32_t task,
                                       const double *inputs,
                                       size_t rows,
                                       size_t cols,
                                       double *logits,
                                       size_t logits_len);

/**
 * Runs a full `train-sequence` experiment from a config file into `out_dir`.
 *
 * # Safety
 * Both arguments must be NUL-terminated strings.
 */
enum RosettaStatus rosetta_run_sequence(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ROSETTA_H */
