#ifndef COAL_H
#define COAL_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. Values 0 to 5 match the `coal` exit codes.
typedef enum CoalStatus {
  COAL_STATUS_OK = 0,
  COAL_STATUS_ERROR = 1,
  COAL_STATUS_INVALID_ARGUMENT = 2,
  COAL_STATUS_VALIDATION = 3,
  COAL_STATUS_IO = 4,
  COAL_STATUS_NUMERIC = 5,
  COAL_STATUS_NULL_POINTER = 6,
  COAL_STATUS_PANIC = 7,
} CoalStatus;

// A validated dataset.
typedef struct CoalDataset CoalDataset;

// A trained scoring network.
typedef struct CoalModel CoalModel;

// Tracker output for one (sequence, expression) pair.
typedef struct CoalTracks CoalTracks;

// One output box, top-left corner plus size in normalized coordinates.
typedef struct CoalTrackRecord {
  uint32_t frame_id;
  uint64_t track_id;
  double x;
  double y;
  double w;
  double h;
  double score;
} CoalTrackRecord;

// Aggregate scores as fractions in [0, 1].
typedef struct CoalHota {
  double hota;
  double deta;
  double assa;
  double detre;
  double detpr;
  double assre;
  double asspr;
  double loca;
} CoalHota;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *coal_version(void);

// Message of the last failed call on this thread, empty after a success.
// Valid until the next call into the library on the same thread.
const char *coal_last_error_message(void);

// Validates and reads the dataset under `root`.
//
// # Safety
// `root` must be a NUL-terminated string and `out` a writable pointer.
enum CoalStatus coal_dataset_load(const char *root, struct CoalDataset **out);

// # Safety
// `dataset` must come from [`coal_dataset_load`] and not be used again.
void coal_dataset_free(struct CoalDataset *dataset);

// Number of sequences, 0 for a null handle.
//
// # Safety
// `dataset` must be null or a live handle.
size_t coal_dataset_sequence_count(const struct CoalDataset *dataset);

// Loads the network from a checkpoint written by `coal train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum CoalStatus coal_model_load(const char *path, struct CoalModel **out);

// # Safety
// `model` must come from [`coal_model_load`] and not be used again.
void coal_model_free(struct CoalModel *model);

// Tracks one expression through one sequence with the default tracker
// settings. `use_f64` selects 64-bit inference.
//
// # Safety
// Handles must be live, strings NUL-terminated and `out` writable.
enum CoalStatus coal_track(const struct CoalModel *model,
                           const struct CoalDataset *dataset,
                           const char *sequence_id,
                           const char *expression_id,
                           bool use_f64,
                           struct CoalTracks **out);

// # Safety
// `tracks` must be null or a live handle.
size_t coal_tracks_len(const struct CoalTracks *tracks);

// Copies record `index` into `out`. Records are sorted by frame, then id.
//
// # Safety
// `tracks` must be a live handle and `out` writable.
enum CoalStatus coal_tracks_get(const struct CoalTracks *tracks,
                                size_t index,
                                struct CoalTrackRecord *out);

// # Safety
// `tracks` must come from [`coal_track`] and not be used again.
void coal_tracks_free(struct CoalTracks *tracks);

// Scores the prediction directory against the dataset. Missing files
// count as empty predictions.
//
// # Safety
// `dataset` must be live, `predictions_dir` NUL-terminated, `out` writable.
enum CoalStatus coal_evaluate(const struct CoalDataset *dataset,
                              const char *predictions_dir,
                              struct CoalHota *out);

// Optimal assignment on a dense row-major `rows x cols` matrix. NaN
// entries are forbidden pairs. Writes the matched column of each row to
// `col_for_row`, or -1 when the row stays unmatched.
//
// # Safety
// `cost` must hold `rows * cols` values and `col_for_row` room for `rows`.
enum CoalStatus coal_linear_assignment(const double *cost,
                                       size_t rows,
                                       size_t cols,
                                       bool maximize,
                                       int64_t *col_for_row);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COAL_H */
