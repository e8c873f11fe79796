#ifndef TLM_H
#define TLM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TlmFinishReason {
  TLM_FINISH_REASON_EOS = 0,
  TLM_FINISH_REASON_MAX_TOKENS = 1,
} TlmFinishReason;

typedef enum TlmStatus {
  TLM_STATUS_OK = 0,
  TLM_STATUS_NULL_POINTER = 1,
  TLM_STATUS_INVALID_ARGUMENT = 2,
  TLM_STATUS_INVALID_REQUEST = 3,
  TLM_STATUS_PROMPT_TOO_LONG = 4,
  TLM_STATUS_EXCEEDS_POOL_CAPACITY = 5,
  TLM_STATUS_OUT_OF_TILES = 6,
  TLM_STATUS_UNKNOWN_REQUEST = 7,
  TLM_STATUS_NOT_READY = 8,
  TLM_STATUS_BUFFER_TOO_SMALL = 9,
  TLM_STATUS_CORRUPT_FILE = 10,
  TLM_STATUS_IO = 11,
  TLM_STATUS_INTERNAL = 12,
  TLM_STATUS_PANIC = 13,
} TlmStatus;

/**
 * Opaque engine handle.
 */
typedef struct TlmEngine TlmEngine;

/**
 * Opaque model handle.
 */
typedef struct TlmModel TlmModel;

typedef struct TlmEngineConfig {
  size_t max_batch;
  size_t total_tiles;
  size_t tile_size;
  size_t decode_reserve_tiles;
} TlmEngineConfig;

typedef struct TlmPoolStats {
  size_t free_tiles;
  size_t used_tiles;
  size_t live_tokens;
  size_t internal_waste_slots;
  size_t live_sequences;
} TlmPoolStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, static storage.
 */
const char *tlm_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *tlm_last_error(void);

/**
 * Build a model with random weights. `preset` is "tiny" or "small".
 *
 * # Safety
 * `preset` must be a valid C string and `out` a writable pointer.
 */
enum TlmStatus tlm_model_random(const char *preset, uint64_t seed, struct TlmModel **out);

/**
 * Load a model file.
 *
 * # Safety
 * `path` must be a valid C string and `out` a writable pointer.
 */
enum TlmStatus tlm_model_load(const char *path, struct TlmModel **out);

/**
 * Write a model file.
 *
 * # Safety
 * `model` must come from this library and `path` be a valid C string.
 */
enum TlmStatus tlm_model_save(const struct TlmModel *model, const char *path);

/**
 * Parameter count, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
uint64_t tlm_model_parameter_count(const struct TlmModel *model);

/**
 * Release a model handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or come from this library and not be freed twice.
 */
void tlm_model_free(struct TlmModel *model);

/**
 * The CLI defaults: 4096 tiles of 16 slots.
 */
struct TlmEngineConfig tlm_engine_config_default(void);

/**
 * Create an engine for `model` with the blocked gemm backend.
 *
 * # Safety
 * `model` must come from this library, `config` be readable and `out`
 * writable.
 */
enum TlmStatus tlm_engine_new(const struct TlmModel *model,
                              const struct TlmEngineConfig *config,
                              struct TlmEngine **out);

/**
 * Queue a prompt of `prompt_len` bytes. The assigned id is written to `id`.
 *
 * # Safety
 * `engine` must come from this library, `prompt` point to `prompt_len`
 * readable bytes and `id` be writable.
 */
enum TlmStatus tlm_engine_submit(struct TlmEngine *engine,
                                 const uint8_t *prompt,
                                 size_t prompt_len,
                                 size_t max_new_tokens,
                                 uint64_t *id);

/**
 * Run one scheduling step. `tokens_generated` may be null.
 *
 * # Safety
 * `engine` must come from this library; `tokens_generated` must be null or
 * writable.
 */
enum TlmStatus tlm_engine_step(struct TlmEngine *engine, size_t *tokens_generated);

/**
 * Step until every submitted request has finished.
 *
 * # Safety
 * `engine` must come from this library.
 */
enum TlmStatus tlm_engine_run(struct TlmEngine *engine);

/**
 * True when nothing is queued or running. Null reads as idle.
 *
 * # Safety
 * `engine` must be null or come from this library.
 */
bool tlm_engine_is_idle(const struct TlmEngine *engine);

/**
 * Copy the generated bytes of finished request `id` into `buf` and forget
 * the request.
 *
 * `text_len` always receives the byte length. When `capacity` is too small
 * the call returns `TLM_STATUS_BUFFER_TOO_SMALL` and keeps the result, so
 * the caller can retry with a larger buffer. `generated_tokens` and
 * `finish_reason` may be null. Unfinished requests give
 * `TLM_STATUS_NOT_READY`.
 *
 * # Safety
 * `engine` must come from this library, `buf` point to `capacity` writable
 * bytes (or be null with `capacity` 0) and `text_len` be writable.
 */
enum TlmStatus tlm_engine_take_output(struct TlmEngine *engine,
                                      uint64_t id,
                                      uint8_t *buf,
                                      size_t capacity,
                                      size_t *text_len,
                                      size_t *generated_tokens,
                                      enum TlmFinishReason *finish_reason);

/**
 * Cancel a queued or running request, releasing its tiles.
 *
 * # Safety
 * `engine` must come from this library.
 */
enum TlmStatus tlm_engine_cancel(struct TlmEngine *engine, uint64_t id);

/**
 * # Safety
 * `engine` must come from this library and `stats` be writable.
 */
enum TlmStatus tlm_engine_pool_stats(const struct TlmEngine *engine, struct TlmPoolStats *stats);

/**
 * Release an engine and any uncollected outputs. Null is ignored.
 *
 * # Safety
 * `engine` must be null or come from this library and not be freed twice.
 */
void tlm_engine_free(struct TlmEngine *engine);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TLM_H */
