#ifndef MASKLAB_H
#define MASKLAB_H

/* Generated by cbindgen from the masklab-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every `masklab_*` call.
 */
typedef enum {
  /**
   * Success; out-values are valid.
   */
  MASKLAB_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  MASKLAB_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  MASKLAB_STATUS_INVALID_UTF8 = 2,
  /**
   * Invalid configuration or arguments (bad JSON, out-of-range index,
   * undersized buffer, failed validation).
   */
  MASKLAB_STATUS_CONTRACT = 3,
  /**
   * An underlying filesystem operation failed.
   */
  MASKLAB_STATUS_IO = 4,
  /**
   * A panic was caught at the ABI boundary.
   */
  MASKLAB_STATUS_PANIC = 5,
} MasklabStatus;

/**
 * Opaque corpus handle: documents, fine-tune triplets, vocabulary, and the
 * closed-book entity split.
 */
typedef struct MasklabCorpus MasklabCorpus;

/**
 * Opaque masking-policy handle, bound to the vocabulary of the corpus it
 * was built from.
 */
typedef struct MasklabPolicy MasklabPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the library version as a static NUL-terminated string. Never
 * fails; the pointer must not be freed.
 */
const char *masklab_version(void);

/**
 * Returns the diagnostic recorded by the most recent failing call on this
 * thread (empty string if none). The pointer stays valid until the next
 * failing call on the same thread; it must not be freed.
 */
const char *masklab_last_error(void);

/**
 * Frees a string returned through a `char **` out-parameter. Null is a
 * no-op.
 *
 * # Safety
 * `string` must be null or a pointer previously returned by this library
 * and not yet freed.
 */
void masklab_string_free(char *string);

/**
 * Generates a corpus from a JSON configuration (`{}` selects the defaults)
 * and writes the new handle to `out_corpus`.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out_corpus` a valid
 * pointer.
 */
MasklabStatus masklab_corpus_generate(const char *config_json, MasklabCorpus **out_corpus);

/**
 * Loads a corpus previously saved with [`masklab_corpus_save`] (or the
 * `gen-corpus` CLI command) and writes the new handle to `out_corpus`.
 *
 * # Safety
 * `dir` must be a NUL-terminated path and `out_corpus` a valid pointer.
 */
MasklabStatus masklab_corpus_load(const char *dir, MasklabCorpus **out_corpus);

/**
 * Saves the corpus into `dir` (created if missing) as the standard four
 * files: `corpus.jsonl`, `triplets.jsonl`, `vocab.json`,
 * `entity-split.json`.
 *
 * # Safety
 * `corpus` must be a live handle and `dir` a NUL-terminated path.
 */
MasklabStatus masklab_corpus_save(const MasklabCorpus *corpus, const char *dir);

/**
 * Writes the number of documents to `out_count`.
 *
 * # Safety
 * `corpus` must be a live handle and `out_count` a valid pointer.
 */
MasklabStatus masklab_corpus_document_count(const MasklabCorpus *corpus, size_t *out_count);

/**
 * Writes the number of fine-tune triplets to `out_count`.
 *
 * # Safety
 * `corpus` must be a live handle and `out_count` a valid pointer.
 */
MasklabStatus masklab_corpus_triplet_count(const MasklabCorpus *corpus, size_t *out_count);

/**
 * Writes the vocabulary size to `out_size`.
 *
 * # Safety
 * `corpus` must be a live handle and `out_size` a valid pointer.
 */
MasklabStatus masklab_corpus_vocab_size(const MasklabCorpus *corpus, size_t *out_size);

/**
 * Writes the token length of document `doc_index` to `out_len`. Fails with
 * `Contract` when the index is out of range.
 *
 * # Safety
 * `corpus` must be a live handle and `out_len` a valid pointer.
 */
MasklabStatus masklab_corpus_document_len(const MasklabCorpus *corpus,
                                          size_t doc_index,
                                          size_t *out_len);

/**
 * Releases a corpus handle. Null is a no-op.
 *
 * # Safety
 * `corpus` must be null or a live handle, and must not be used afterwards.
 */
void masklab_corpus_free(MasklabCorpus *corpus);

/**
 * Builds a masking policy from a JSON spec (e.g. `{"name":"ssm"}` or
 * `{"name":"rand","rate":0.15}`), training the learned arms on the corpus'
 * fine-tune-train triplets unless the spec names a checkpoint. The baseline
 * spec `{"name":"none"}` is rejected because it names the absence of a
 * policy.
 *
 * # Safety
 * `corpus` must be a live handle, `spec_json` a NUL-terminated string, and
 * `out_policy` a valid pointer.
 */
MasklabStatus masklab_policy_build(const MasklabCorpus *corpus,
                                   const char *spec_json,
                                   MasklabPolicy **out_policy);

/**
 * Writes the policy's canonical name (e.g. `"ssm"`, `"supervised-top1"`)
 * to `out_name` as a freshly allocated string; release it with
 * [`masklab_string_free`].
 *
 * # Safety
 * `policy` must be a live handle and `out_name` a valid pointer.
 */
MasklabStatus masklab_policy_name(const MasklabPolicy *policy, char **out_name);

/**
 * Samples this policy's masking decisions for document `doc_index` into the
 * caller's buffer: one byte per token, 1 = masked. `out_len` always
 * receives the document length; when `capacity` is too small the call fails
 * with `Contract` and writes nothing else (query the length first with
 * [`masklab_corpus_document_len`]). Equal seeds reproduce equal decisions.
 *
 * # Safety
 * `policy` and `corpus` must be live handles; `out_flags` must point to at
 * least `capacity` writable bytes; `out_len` must be a valid pointer.
 */
MasklabStatus masklab_policy_mask(const MasklabPolicy *policy,
                                  const MasklabCorpus *corpus,
                                  size_t doc_index,
                                  uint64_t seed,
                                  uint8_t *out_flags,
                                  size_t capacity,
                                  size_t *out_len);

/**
 * Releases a policy handle. Null is a no-op.
 *
 * # Safety
 * `policy` must be null or a live handle, and must not be used afterwards.
 */
void masklab_policy_free(MasklabPolicy *policy);

/**
 * Runs the full two-stage experiment described by a manifest JSON document
 * and writes a summary JSON string (report plus artifact paths) to
 * `out_report_json`; release it with [`masklab_string_free`]. Artifacts
 * land in the manifest's `out_dir` exactly as with the CLI `run-experiment`
 * command.
 *
 * # Safety
 * `manifest_json` must be a NUL-terminated string and `out_report_json` a
 * valid pointer.
 */
MasklabStatus masklab_run_experiment(const char *manifest_json, char **out_report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MASKLAB_H */
