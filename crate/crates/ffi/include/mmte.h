#ifndef MMTE_H
#define MMTE_H

#include <stddef.h>
#include <stdint.h>

typedef enum MmteStatus {
  MMTE_STATUS_OK = 0,
  MMTE_STATUS_NULL_POINTER = 1,
  MMTE_STATUS_INVALID_UTF8 = 2,
  // The output buffer is too small; the required length was written to the length out-pointer.
  MMTE_STATUS_BUFFER_TOO_SMALL = 3,
  MMTE_STATUS_INVALID = 4,
  MMTE_STATUS_SHAPE = 5,
  MMTE_STATUS_PARSE = 6,
  MMTE_STATUS_IO = 7,
  MMTE_STATUS_CHECKPOINT = 8,
  MMTE_STATUS_UNKNOWN_ID = 9,
  MMTE_STATUS_ALL_PAD = 10,
  MMTE_STATUS_OTHER = 11,
  MMTE_STATUS_PANIC = 12,
} MmteStatus;

// Opaque encoder weights.
typedef struct MmteEncoder MmteEncoder;

// Opaque subword tokenizer.
typedef struct MmteTokenizer MmteTokenizer;

// Copies the calling thread's last error message (NUL-terminated) into `buf`.
// Returns the message length excluding the terminator.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
size_t mmte_last_error(char *buf, size_t cap);

// Loads a tokenizer file written by the `mmte` tool.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MmteStatus mmte_tokenizer_load(const char *path, struct MmteTokenizer **out);

// # Safety
// `tok` must come from `mmte_tokenizer_load` and not be used afterwards.
void mmte_tokenizer_free(struct MmteTokenizer *tok);

// # Safety
// `tok` must be a live handle; `out` must be writable.
enum MmteStatus mmte_tokenizer_vocab_size(const struct MmteTokenizer *tok, size_t *out);

// Segments `text` into ids. `word_starts` may be null; otherwise it receives one flag
// (1 at a word's first subword) per id and must hold `cap` bytes.
//
// # Safety
// `ids` (and `word_starts` when non-null) must hold `cap` elements; `len_out` must be writable.
enum MmteStatus mmte_tokenizer_encode(const struct MmteTokenizer *tok,
                                      const char *text,
                                      uint32_t *ids,
                                      uint8_t *word_starts,
                                      size_t cap,
                                      size_t *len_out);

// Decodes ids into a NUL-terminated string. `len_out` receives the byte length without
// the terminator; `cap` must cover the terminator too.
//
// # Safety
// `ids` must hold `n` values; `buf` must hold `cap` bytes; `len_out` must be writable.
enum MmteStatus mmte_tokenizer_decode(const struct MmteTokenizer *tok,
                                      const uint32_t *ids,
                                      size_t n,
                                      char *buf,
                                      size_t cap,
                                      size_t *len_out);

// Loads encoder weights from an encoder-only or full checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MmteStatus mmte_encoder_load(const char *path, struct MmteEncoder **out);

// # Safety
// `enc` must come from `mmte_encoder_load` and not be used afterwards.
void mmte_encoder_free(struct MmteEncoder *enc);

// Width of each encoder output row.
//
// # Safety
// `enc` must be a live handle; `out` must be writable.
enum MmteStatus mmte_encoder_dim(const struct MmteEncoder *enc, size_t *out);

// Encodes one sequence into `n × dim` row-major floats. Id 0 (padding) is masked out.
//
// # Safety
// `ids` must hold `n` values; `out` must hold `cap` floats; `len_out` must be writable.
enum MmteStatus mmte_encoder_encode(const struct MmteEncoder *enc,
                                    const uint32_t *ids,
                                    size_t n,
                                    float *out,
                                    size_t cap,
                                    size_t *len_out);

// Corpus BLEU over `n` whitespace-tokenized hypothesis/reference strings.
//
// # Safety
// `hyps` and `refs` must each hold `n` NUL-terminated strings; `out` must be writable.
enum MmteStatus mmte_bleu(const char *const *hyps, const char *const *refs, size_t n, double *out);

// Span precision, recall and F1 of one predicted IOB tag sequence against gold.
//
// # Safety
// `pred` and `gold` must each hold `n` NUL-terminated tags; the outputs must be writable.
enum MmteStatus mmte_span_f1(const char *const *pred,
                             const char *const *gold,
                             size_t n,
                             double *precision,
                             double *recall,
                             double *f1);

// Temperature-sampling probabilities for `n` corpus sizes, written to `probs[..n]`.
//
// # Safety
// `sizes` and `probs` must each hold `n` elements.
enum MmteStatus mmte_sampling_distribution(const uint64_t *sizes,
                                           size_t n,
                                           double temperature,
                                           double *probs);

#endif  /* MMTE_H */
