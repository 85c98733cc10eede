/* C API for the fedattn shared library.
 *
 * All functions return FA_OK (0) on success or a nonzero status code; the
 * message for the most recent failure on the calling thread is available via
 * fa_last_error(). Objects are opaque handles owned by the caller and
 * released with the matching *_free function.
 */
#ifndef FEDATTN_H
#define FEDATTN_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

enum {
    FA_OK = 0,
    FA_ERR = 1,         /* unclassified failure */
    FA_ERR_CONFIG = 2,  /* invalid configuration / spec */
    FA_ERR_NUMERIC = 3, /* numerical degeneracy (non-finite state, masked-out row) */
    FA_ERR_SHAPE = 4,   /* dimension mismatch */
    FA_ERR_IO = 5       /* file I/O failure */
};

const char* fa_version(void);

/* Message for the most recent error on this thread; empty string if none. */
const char* fa_last_error(void);

typedef struct fa_model fa_model;
typedef struct fa_corpus fa_corpus;
typedef struct fa_partition fa_partition;
typedef struct fa_trace fa_trace;

/* config_json: {"d":32,"d_ff":64,"M":8,"vocab":64,"seed":1} */
int fa_model_create(const char* config_json, fa_model** out);
int fa_model_save(const fa_model* model, const char* path);
int fa_model_load(const char* path, fa_model** out);
void fa_model_free(fa_model* model);

/* corpus_json: {"shots":3,"unit_len_min":32,"unit_len_max":32,"vocab":64,"seed":1} */
int fa_corpus_generate(const char* corpus_json, fa_corpus** out);
int fa_corpus_length(const fa_corpus* corpus, int64_t* out_length);
void fa_corpus_free(fa_corpus* corpus);

/* strategy: tokseg_qag | tokseg_qex | semseg_qag | semseg_qex */
int fa_partition_create(const fa_corpus* corpus, int n_participants, const char* strategy,
                        uint64_t seed, fa_partition** out);
int fa_partition_from_json(const char* json_text, fa_partition** out);
/* Writes the JSON document (and its length) into the caller's buffer; fails
 * with FA_ERR_CONFIG if the buffer is too small, reporting the needed size
 * through out_needed. */
int fa_partition_to_json(const fa_partition* partition, char* buf, size_t cap,
                         size_t* out_needed);
void fa_partition_free(fa_partition* partition);

/* run_json:
 *   {"H":2}                            uniform schedule, or
 *   {"schedule":{"kind":"deep_half","T":4}}
 *   plus optional "local_token_ratio", "kv_exchange_ratio", "wire_bits",
 *   "seed", "topology", "threads", "publisher_H". */
int fa_run(const fa_model* model, const fa_corpus* corpus, const fa_partition* partition,
           const char* run_json, fa_trace** out);
int fa_trace_summary_json(const fa_trace* trace, char* buf, size_t cap, size_t* out_needed);
/* Frobenius distance between the run's final states and the centralized
 * reference over the same surviving tokens. */
int fa_trace_final_deviation(const fa_trace* trace, const fa_model* model, double* out);
int fa_trace_dump_messages(const fa_trace* trace, const char* path);
int fa_decode_greedy(const fa_trace* trace, const fa_model* model, int max_new, int* out_ids,
                     size_t cap, size_t* out_count);
void fa_trace_free(fa_trace* trace);

/* Experiment driver: parses the spec JSON file, runs the sweep and writes
 * results.csv + summary.csv (run) or bounds.csv (bounds) under out_dir.
 * seeds_csv optionally overrides the spec's seed list ("1,2,3"). */
int fa_run_experiment(const char* spec_path, const char* out_dir, const char* seeds_csv,
                      int threads);
int fa_emit_bounds(const char* spec_path, const char* out_dir, const char* seeds_csv,
                   int threads);

/* (communication reduction, error level) for the step H -> H+1. */
int fa_marginal_comm(int H, double* out_reduction, double* out_error_level);

#ifdef __cplusplus
}
#endif

#endif /* FEDATTN_H */
