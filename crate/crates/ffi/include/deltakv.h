#ifndef DELTAKV_H
#define DELTAKV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define DKV_OK 0

#define DKV_ERR_NULL -1

#define DKV_ERR_INPUT -2

#define DKV_ERR_SHAPE -3

#define DKV_ERR_CONFIG -4

#define DKV_ERR_POOL -5

#define DKV_ERR_RUNTIME -6

#define DKV_ERR_BUFFER -7

#define DKV_ERR_PANIC -8

/**
 * Opaque engine handle.
 */
typedef struct DkvEngine DkvEngine;

typedef struct DkvBudgetRatios {
  double kr;
  double cr;
  double budget;
} DkvBudgetRatios;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null.
 */
const char *dkv_last_error(void);

/**
 * Builds an engine from a JSON engine configuration (null selects the
 * defaults) and stores the handle in `*out`.
 *
 * # Safety
 * `config_json` is null or a NUL-terminated string; `out` is writable.
 */
int32_t dkv_engine_new(const char *config_json, struct DkvEngine **out);

/**
 * # Safety
 * `h` is null or a handle from `dkv_engine_new` not yet freed.
 */
void dkv_engine_free(struct DkvEngine *h);

/**
 * Vocabulary size, i.e. the logits length.
 *
 * # Safety
 * `h` is a live handle; `out` is writable.
 */
int32_t dkv_engine_vocab(struct DkvEngine *h, size_t *out);

/**
 * Number of tokens processed by the current request.
 *
 * # Safety
 * `h` is a live handle; `out` is writable.
 */
int32_t dkv_engine_len(struct DkvEngine *h, size_t *out);

/**
 * Prefills `n_tokens` tokens in chunks of `chunk_len`. When `logits_out` is
 * non-null, the last position's logits are written there (`logits_cap` must
 * be at least the vocabulary size).
 *
 * # Safety
 * `h` is a live handle; `tokens` holds `n_tokens` values; `logits_out` is
 * null or has room for `logits_cap` floats.
 */
int32_t dkv_engine_prefill(struct DkvEngine *h,
                           const uint32_t *tokens,
                           size_t n_tokens,
                           size_t chunk_len,
                           float *logits_out,
                           size_t logits_cap);

/**
 * Appends one token and writes its logits.
 *
 * # Safety
 * As for `dkv_engine_prefill`.
 */
int32_t dkv_engine_decode(struct DkvEngine *h,
                          uint32_t token,
                          float *logits_out,
                          size_t logits_cap);

/**
 * Drops the current request and starts an empty one.
 *
 * # Safety
 * `h` is a live handle.
 */
int32_t dkv_engine_reset(struct DkvEngine *h);

/**
 * Memory audit of the current request as a JSON string owned by the
 * library; release it with `dkv_string_free`.
 *
 * # Safety
 * `h` is a live handle; `out` is writable.
 */
int32_t dkv_engine_memory_report(struct DkvEngine *h, char **out);

/**
 * # Safety
 * `s` is null or a string returned by this library, not yet freed.
 */
void dkv_string_free(char *s);

/**
 * Keep ratio, compute ratio and budget for a layer layout.
 *
 * # Safety
 * `out` is writable.
 */
int32_t dkv_budget_ratios(size_t l_full,
                          size_t l_total,
                          size_t stride,
                          double latent_ratio,
                          double q,
                          double budget,
                          struct DkvBudgetRatios *out);

/**
 * Byte size of one quantized latent of width `latent_dim`.
 */
size_t dkv_quantized_bytes(size_t latent_dim);

/**
 * Quantizes `latent_dim` floats into `dkv_quantized_bytes(latent_dim)` bytes.
 *
 * # Safety
 * `z` holds `latent_dim` floats; `out` has room for `out_cap` bytes.
 */
int32_t dkv_quantize(const float *z, size_t latent_dim, uint8_t *out, size_t out_cap);

/**
 * Inverse of `dkv_quantize`.
 *
 * # Safety
 * `bytes` holds `n_bytes` bytes; `out` has room for `latent_dim` floats.
 */
int32_t dkv_dequantize(const uint8_t *bytes, size_t n_bytes, size_t latent_dim, float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DELTAKV_H */
