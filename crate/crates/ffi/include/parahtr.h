#ifndef PARAHTR_H
#define PARAHTR_H

/* Generated with cbindgen:0.27.0 */

#include <stddef.h>
#include <stdint.h>

typedef enum PhtrStatus {
  PHTR_STATUS_OK = 0,
  PHTR_STATUS_NULL_ARGUMENT = 1,
  PHTR_STATUS_INVALID_ARGUMENT = 2,
  PHTR_STATUS_IO = 3,
  PHTR_STATUS_FORMAT = 4,
  PHTR_STATUS_DIMENSION = 5,
  PHTR_STATUS_NUMERIC = 6,
  // The transcript carries no attention map (standard-collapse model).
  PHTR_STATUS_NO_ATTENTION = 7,
  // The output buffer is smaller than required.
  PHTR_STATUS_BUFFER_TOO_SMALL = 8,
  PHTR_STATUS_INTERNAL = 99,
} PhtrStatus;

// A loaded model.
typedef struct PhtrModel PhtrModel;

// The result of one transcription.
typedef struct PhtrTranscript PhtrTranscript;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *phtr_version(void);

// Message of the last failed call on this thread; empty if none. Valid
// until the next failing call on the same thread.
const char *phtr_last_error_message(void);

// Loads a checkpoint written by `parahtr train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum PhtrStatus phtr_model_load(const char *path, struct PhtrModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from [`phtr_model_load`] and not be used afterwards.
void phtr_model_free(struct PhtrModel *model);

// Image pixels covered by one cell of the attention map.
//
// # Safety
// `model` must be a live handle; the out pointers must be valid.
enum PhtrStatus phtr_model_cell(const struct PhtrModel *model,
                                uintptr_t *cell_height,
                                uintptr_t *cell_width);

// Transcribes an 8-bit grayscale image (row-major, `height * width` bytes,
// dark ink on a light background).
//
// # Safety
// `pixels` must point to `height * width` readable bytes; `model` must be a
// live handle and `out` a valid pointer.
enum PhtrStatus phtr_transcribe(const struct PhtrModel *model,
                                const uint8_t *pixels,
                                uintptr_t height,
                                uintptr_t width,
                                struct PhtrTranscript **out);

// Reads a binary PGM file and transcribes it.
//
// # Safety
// `model` must be a live handle, `path` a NUL-terminated string and `out` a
// valid pointer.
enum PhtrStatus phtr_transcribe_file(const struct PhtrModel *model,
                                     const char *path,
                                     struct PhtrTranscript **out);

// The transcribed text, or null for a null handle.
//
// # Safety
// `transcript` must be null or a live handle.
const char *phtr_transcript_text(const struct PhtrTranscript *transcript);

// Dimensions of the attention map: collapse steps and the feature grid.
//
// # Safety
// `transcript` must be a live handle; the out pointers must be valid.
enum PhtrStatus phtr_transcript_attention_shape(const struct PhtrTranscript *transcript,
                                                uintptr_t *steps,
                                                uintptr_t *height,
                                                uintptr_t *width);

// Copies the attention weights, laid out `[step][row][column]`, into `buffer`.
//
// # Safety
// `transcript` must be a live handle and `buffer` must hold `len` doubles.
enum PhtrStatus phtr_transcript_attention(const struct PhtrTranscript *transcript,
                                          double *buffer,
                                          uintptr_t len);

// Releases a transcript; null is ignored.
//
// # Safety
// `transcript` must come from a transcribe call and not be used afterwards.
void phtr_transcript_free(struct PhtrTranscript *transcript);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PARAHTR_H */
