#ifndef CUMADAPT_H
#define CUMADAPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// i-vector length normalization selectable from C.
typedef enum CaNormalization {
  CA_NORMALIZATION_NONE = 0,
  CA_NORMALIZATION_UNITY = 1,
  CA_NORMALIZATION_SQRT_D = 2,
} CaNormalization;

// Result of every fallible call. Values 1 to 22 mirror the toolkit's
// error codes.
typedef enum CaStatus {
  CA_STATUS_OK = 0,
  CA_STATUS_INVALID_INPUT = 1,
  CA_STATUS_DIMENSION_MISMATCH = 2,
  CA_STATUS_NON_FINITE = 3,
  CA_STATUS_AUDIO_TOO_SHORT = 4,
  CA_STATUS_NO_SPEECH = 5,
  CA_STATUS_UBM_MISMATCH = 6,
  CA_STATUS_DUPLICATE_SLOT = 7,
  CA_STATUS_INVALID_SLOT = 8,
  CA_STATUS_MISSING_SLOT = 9,
  CA_STATUS_BAD_MAGIC = 10,
  CA_STATUS_VERSION_MISMATCH = 11,
  CA_STATUS_TRUNCATED = 12,
  CA_STATUS_DUPLICATE_ID = 13,
  CA_STATUS_MISSING_FILE = 14,
  CA_STATUS_MALFORMED_LINE = 15,
  CA_STATUS_DANGLING_REFERENCE = 16,
  CA_STATUS_CHECKSUM_MISMATCH = 17,
  CA_STATUS_KIND_MISMATCH = 18,
  CA_STATUS_CONFIG = 19,
  CA_STATUS_WAV = 20,
  CA_STATUS_CODEC = 21,
  CA_STATUS_IO = 22,
  CA_STATUS_NULL_POINTER = 100,
  CA_STATUS_INVALID_UTF8 = 101,
  CA_STATUS_BUFFER_TOO_SMALL = 102,
  CA_STATUS_PANIC = 103,
} CaStatus;

// BLSTM acoustic model, possibly with affine transforms.
typedef struct CaAm CaAm;

// Diagonal-covariance GMM.
typedef struct CaGmm CaGmm;

// Radial Gaussianization transform.
typedef struct CaRg CaRg;

// Total-variability model with its UBM.
typedef struct CaTv CaTv;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *ca_version(void);

// Message of the last failed call on this thread, or NULL. Valid until
// the next call into the library from the same thread.
const char *ca_last_error_message(void);

// Fits a GMM with EM on `n` x `d` frames.
//
// # Safety
// `frames` must point to `n * d` doubles and `out` to writable storage.
enum CaStatus ca_gmm_fit(const double *frames,
                         size_t n,
                         size_t d,
                         size_t components,
                         size_t iterations,
                         uint64_t seed,
                         struct CaGmm **out);

// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum CaStatus ca_gmm_load(const char *path_, struct CaGmm **out);

// # Safety
// `gmm` must come from this library; `path` must be NUL-terminated.
enum CaStatus ca_gmm_save(const struct CaGmm *gmm, const char *path_);

// Feature dimension, 0 for NULL.
//
// # Safety
// `gmm` must be NULL or come from this library.
size_t ca_gmm_dim(const struct CaGmm *gmm);

// # Safety
// `gmm` must be NULL or come from this library.
size_t ca_gmm_num_components(const struct CaGmm *gmm);

// Log-density of one frame.
//
// # Safety
// `frame` must point to `d` doubles and `out` to one writable double.
enum CaStatus ca_gmm_log_likelihood(const struct CaGmm *gmm,
                                    const double *frame,
                                    size_t d,
                                    double *out);

// # Safety
// `gmm` must be NULL or come from this library, and not be used afterwards.
void ca_gmm_free(struct CaGmm *gmm);

// # Safety
// `path` must be NUL-terminated and `out` writable.
enum CaStatus ca_tv_load(const char *path_, struct CaTv **out);

// i-vector dimension, 0 for NULL.
//
// # Safety
// `tv` must be NULL or come from this library.
size_t ca_tv_rank(const struct CaTv *tv);

// Extracts the i-vector of `n` x `d` frames (all frames count as speech)
// into `out`, which must hold at least the TV rank.
//
// # Safety
// `frames` must point to `n * d` doubles and `out` to `out_len` doubles.
enum CaStatus ca_tv_extract(const struct CaTv *tv,
                            const double *frames,
                            size_t n,
                            size_t d,
                            enum CaNormalization normalization,
                            double *out,
                            size_t out_len);

// # Safety
// `tv` must be NULL or come from this library, and not be used afterwards.
void ca_tv_free(struct CaTv *tv);

// # Safety
// `path` must be NUL-terminated and `out` writable.
enum CaStatus ca_rg_load(const char *path_, struct CaRg **out);

// Radially Gaussianizes a raw i-vector of length `len` in place.
//
// # Safety
// `v` must point to `len` writable doubles.
enum CaStatus ca_rg_apply(const struct CaRg *rg, double *v, size_t len);

// # Safety
// `rg` must be NULL or come from this library, and not be used afterwards.
void ca_rg_free(struct CaRg *rg);

// Loads an acoustic model container.
//
// # Safety
// `path` must be NUL-terminated and `out` writable.
enum CaStatus ca_am_load(const char *path_, struct CaAm **out);

// Writes the feature, i-vector and output dimensions.
//
// # Safety
// The three outputs must be writable.
enum CaStatus ca_am_dims(const struct CaAm *am,
                         size_t *feature_dim,
                         size_t *ivector_dim,
                         size_t *output_dim);

// Eval-mode posteriors (`n` x output dim, row-major) of an utterance
// without affine transforms. `ivector` may be NULL when the model takes
// none.
//
// # Safety
// `frames` must point to `n * d` doubles, `ivector` to `r` doubles (or be
// NULL with `r == 0`), and `out` to `out_len` writable doubles.
enum CaStatus ca_am_forward(const struct CaAm *am,
                            const double *frames,
                            size_t n,
                            size_t d,
                            const double *ivector,
                            size_t r,
                            double *out,
                            size_t out_len);

// # Safety
// `am` must be NULL or come from this library, and not be used afterwards.
void ca_am_free(struct CaAm *am);

// Mean focal loss of `n` x `k` posteriors against `targets`.
//
// # Safety
// `posteriors` must point to `n * k` doubles, `targets` to `n` values and
// `out` to one writable double.
enum CaStatus ca_focal_loss(const double *posteriors,
                            size_t n,
                            size_t k,
                            const size_t *targets,
                            double gamma,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CUMADAPT_H */
