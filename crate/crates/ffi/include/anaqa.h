#ifndef ANAQA_H
#define ANAQA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AnaqaStatus {
  ANAQA_STATUS_OK = 0,
  ANAQA_STATUS_NULL_ARGUMENT = 1,
  ANAQA_STATUS_INVALID_UTF8 = 2,
  ANAQA_STATUS_CONFIG = 3,
  ANAQA_STATUS_PHASE = 4,
  ANAQA_STATUS_IO = 5,
  ANAQA_STATUS_EVAL_INCOMPLETE = 6,
  ANAQA_STATUS_PANIC = 7,
} AnaqaStatus;

// Validated run configuration.
typedef struct AnaqaConfig AnaqaConfig;

// Loaded document collection.
typedef struct AnaqaCorpus AnaqaCorpus;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *anaqa_version(void);

// Message for the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *anaqa_last_error(void);

// # Safety
// `s` must come from this library and not have been freed.
void anaqa_string_free(char *s);

// Loads a corpus manifest and all referenced documents.
//
// # Safety
// `manifest_path` must be a NUL-terminated string; `out` must be writable.
enum AnaqaStatus anaqa_corpus_load(const char *manifest_path, struct AnaqaCorpus **out);

// Number of documents, or 0 for a null handle.
//
// # Safety
// `corpus` must be null or a live handle.
size_t anaqa_corpus_len(const struct AnaqaCorpus *corpus);

// # Safety
// `corpus` must be null or a handle from [`anaqa_corpus_load`].
void anaqa_corpus_free(struct AnaqaCorpus *corpus);

// Parses and validates a JSON run configuration. Credentials inside the
// JSON are rejected; http providers read them from the environment
// variable they name.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum AnaqaStatus anaqa_config_from_json(const char *json, struct AnaqaConfig **out);

// Loads a TOML or JSON run configuration file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum AnaqaStatus anaqa_config_load(const char *path, struct AnaqaConfig **out);

// # Safety
// `config` must be null or a handle from this library.
void anaqa_config_free(struct AnaqaConfig *config);

// Runs the full workflow into `run_dir` and returns the final answer text
// in `answer_out`.
//
// # Safety
// Handles must be live; strings NUL-terminated; `answer_out` writable.
enum AnaqaStatus anaqa_run_workflow(const struct AnaqaConfig *config,
                                    const struct AnaqaCorpus *corpus,
                                    const char *question,
                                    const char *run_dir,
                                    bool resume,
                                    char **answer_out);

// Flat retrieval baseline into `run_dir`; the answer text goes to
// `answer_out`.
//
// # Safety
// Handles must be live; strings NUL-terminated; `answer_out` writable.
enum AnaqaStatus anaqa_run_baseline(const struct AnaqaConfig *config,
                                    const struct AnaqaCorpus *corpus,
                                    const char *question,
                                    const char *run_dir,
                                    char **answer_out);

// Judges `runs_dir` against a benchmark file with the configured judge and
// writes the report JSON to `report_out`. Returns `EvalIncomplete` (with
// the report still written) when some instances have no run.
//
// # Safety
// `config` must be live; strings NUL-terminated; `report_out` writable.
enum AnaqaStatus anaqa_evaluate(const struct AnaqaConfig *config,
                                const char *benchmark_path,
                                const char *runs_dir,
                                char **report_out);

// 1 when `predicted` matches the number `gold` on integer digits and the
// first decimal, 0 when not, -1 on bad arguments.
//
// # Safety
// Both arguments must be NUL-terminated strings.
int32_t anaqa_numeric_match(const char *gold, const char *predicted);

// Coverage discounted by the error rate: min(c, 1 - e).
double anaqa_conservative_coverage(double c, double e);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ANAQA_H */
