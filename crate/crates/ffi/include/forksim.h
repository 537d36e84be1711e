#ifndef FORKSIM_H
#define FORKSIM_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FsimStatus {
  FSIM_STATUS_OK = 0,
  FSIM_STATUS_NULL_POINTER = 1,
  FSIM_STATUS_INVALID_UTF8 = 2,
  /**
   * Malformed or invalid scenario.
   */
  FSIM_STATUS_CONFIG = 3,
  /**
   * The simulation itself failed.
   */
  FSIM_STATUS_SIM = 4,
  FSIM_STATUS_IO = 5,
  /**
   * Nothing to report, e.g. a percentile of an empty class.
   */
  FSIM_STATUS_NO_DATA = 6,
  FSIM_STATUS_INVALID_ARGUMENT = 7,
  FSIM_STATUS_PANIC = 8,
} FsimStatus;

typedef enum FsimVerdict {
  FSIM_VERDICT_PASS = 0,
  FSIM_VERDICT_LEAK_DETECTED = 1,
  FSIM_VERDICT_FAIL = 2,
  FSIM_VERDICT_UNCHECKED = 3,
} FsimVerdict;

/**
 * The result of one run.
 */
typedef struct FsimReport FsimReport;

/**
 * A parsed scenario.
 */
typedef struct FsimScenario FsimScenario;

typedef struct FsimTableShape {
  uint64_t pgd_entries;
  uint64_t pud_entries;
  uint64_t pmd_entries;
  uint64_t pte_entries;
} FsimTableShape;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Page-table entry counts per level for `mem_bytes` mapped from zero.
 *
 * # Safety
 * `out` must point to writable memory for one `FsimTableShape`.
 */
enum FsimStatus fsim_table_shape(uint64_t mem_bytes,
                                 uint64_t page_bytes,
                                 struct FsimTableShape *out);

/**
 * Parses a TOML scenario.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must be writable.
 */
enum FsimStatus fsim_scenario_parse(const char *toml, struct FsimScenario **out);

/**
 * Loads a TOML scenario file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FsimStatus fsim_scenario_load(const char *path, struct FsimScenario **out);

/**
 * Runs a scenario to completion.
 *
 * # Safety
 * `scenario` must be a live handle; `out` must be writable.
 */
enum FsimStatus fsim_scenario_run(const struct FsimScenario *scenario, struct FsimReport **out);

/**
 * # Safety
 * `scenario` must be null or a handle not yet freed.
 */
void fsim_scenario_free(struct FsimScenario *scenario);

/**
 * The run summary as pretty-printed JSON. Free with `fsim_string_free`.
 *
 * # Safety
 * `report` must be a live handle; `out` must be writable.
 */
enum FsimStatus fsim_report_summary_json(const struct FsimReport *report, char **out);

/**
 * 99th-percentile latency in ns of normal (`snapshot == 0`) or snapshot
 * queries. `FSIM_STATUS_NO_DATA` when the class is empty.
 *
 * # Safety
 * `report` must be a live handle; `out_ns` must be writable.
 */
enum FsimStatus fsim_report_p99(const struct FsimReport *report, bool snapshot, uint64_t *out_ns);

/**
 * # Safety
 * `report` must be a live handle; `out` must be writable.
 */
enum FsimStatus fsim_report_consistency(const struct FsimReport *report, enum FsimVerdict *out);

/**
 * Writes the CSV and JSON reports (and `trace.jsonl` when `trace`) into
 * `dir`, creating it if needed.
 *
 * # Safety
 * `report` must be a live handle; `dir` a NUL-terminated string.
 */
enum FsimStatus fsim_report_write(const struct FsimReport *report, const char *dir, bool trace);

/**
 * # Safety
 * `report` must be null or a handle not yet freed.
 */
void fsim_report_free(struct FsimReport *report);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void fsim_string_free(char *s);

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next failing call on the same thread; do not free.
 */
const char *fsim_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FORKSIM_H */
