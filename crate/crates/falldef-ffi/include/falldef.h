/* C interface to the falldef fall-detection library. Generated; do not edit. */

#ifndef FALLDEF_H
#define FALLDEF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum {
  // The call succeeded.
  FALLDEF_STATUS_OK = 0,
  // A required pointer argument was null.
  FALLDEF_STATUS_NULL_ARGUMENT = 1,
  // The path was not valid UTF-8.
  FALLDEF_STATUS_INVALID_PATH = 2,
  // The model file could not be read.
  FALLDEF_STATUS_IO = 3,
  // The model file was read but is not a valid model (bad JSON, wrong
  // format version, malformed fields).
  FALLDEF_STATUS_MALFORMED_MODEL = 4,
  // The window length does not match the model's expected window size.
  FALLDEF_STATUS_BAD_WINDOW = 5,
  // Sample values were non-finite, or inference failed numerically.
  FALLDEF_STATUS_NUMERIC = 6,
  // The stream has buffered the sample but does not hold a full window
  // yet; no classification was produced. Not a failure.
  FALLDEF_STATUS_BUFFERING = 7,
  // An internal invariant was violated. A bug; please report it.
  FALLDEF_STATUS_PANIC = 8,
} FalldefStatus;

// A loaded classifier. Obtained from [`falldef_model_load`]; release with
// [`falldef_model_free`].
typedef struct FalldefModel FalldefModel;

// A per-source sliding window bound to one model. Streams keep their own
// reference to the model, so the order of `free` calls does not matter.
typedef struct FalldefStream FalldefStream;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Load a model file produced by training.
//
// On success writes a new handle to `out` and returns `Ok`. On failure
// `out` is untouched and the status says what went wrong.
FalldefStatus falldef_model_load(const char *path, FalldefModel **out);

// Release a model handle. Safe on null. Live streams keep the underlying
// model alive, so they stay valid after this call.
void falldef_model_free(FalldefModel *model);

// Samples per classification window. Returns 0 if `model` is null.
size_t falldef_model_window_size(const FalldefModel *model);

// Classify one complete window.
//
// `samples` points at `sample_count` interleaved triples
// `ax0, ay0, az0, ax1, ...` (so `3 * sample_count` doubles), and
// `sample_count` must equal [`falldef_model_window_size`]. On `Ok`,
// `*is_fall` is 1 or 0 and `*p_fall` is the fall probability; either
// out-pointer may be null if the caller does not need it.
FalldefStatus falldef_model_classify(const FalldefModel *model,
                                     const double *samples,
                                     size_t sample_count,
                                     int *is_fall,
                                     double *p_fall);

// Create a sliding-window stream over `model`, initially empty.
FalldefStatus falldef_stream_new(const FalldefModel *model, FalldefStream **out);

// Push one sample and classify when a full window is available.
//
// Returns `Buffering` until `window_size` samples have arrived; after that
// every push classifies the newest window and returns `Ok` (or an error,
// which leaves the buffered samples intact). Out-pointers behave as in
// [`falldef_model_classify`].
FalldefStatus falldef_stream_push(FalldefStream *stream,
                                  double ax,
                                  double ay,
                                  double az,
                                  int *is_fall,
                                  double *p_fall);

// Drop all buffered samples, e.g. after a gap in the source.
void falldef_stream_reset(FalldefStream *stream);

// Release a stream handle. Safe on null.
void falldef_stream_free(FalldefStream *stream);

// Message for the most recent failure on the calling thread, or null if
// the last call succeeded. The pointer stays valid until the next falldef
// call on this thread; do not free it.
const char *falldef_last_error_message(void);

// Library version as a static string; do not free it.
const char *falldef_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FALLDEF_H */
