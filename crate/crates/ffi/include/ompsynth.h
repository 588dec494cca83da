#ifndef OMPSYNTH_H
#define OMPSYNTH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. 1..=5 follow the CLI exit codes.
 */
typedef enum OmpsStatus {
  OMPS_STATUS_OK = 0,
  OMPS_STATUS_OTHER = 1,
  OMPS_STATUS_CONFIG = 2,
  OMPS_STATUS_ENDPOINT = 3,
  OMPS_STATUS_TOOLCHAIN = 4,
  OMPS_STATUS_FORMAT = 5,
  OMPS_STATUS_NULL_ARGUMENT = 6,
  OMPS_STATUS_INVALID_UTF8 = 7,
  OMPS_STATUS_PANIC = 8,
} OmpsStatus;

/**
 * Opaque Caliper work-percentage profile.
 */
typedef struct OmpsCaliperProfile OmpsCaliperProfile;

/**
 * Opaque canonical race report.
 */
typedef struct OmpsRaceReport OmpsRaceReport;

/**
 * Inclusive 1-based line range.
 */
typedef struct OmpsSpan {
  uint32_t start_line;
  uint32_t end_line;
} OmpsSpan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *omps_last_error_message(void);

/**
 * Library version, static storage.
 */
const char *omps_version(void);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void omps_string_free(char *s);

/**
 * Parses raw ThreadSanitizer output; locations are kept for
 * `candidate_file` only.
 *
 * # Safety
 * Pointers must be valid NUL-terminated strings; `out` must be writable.
 */
enum OmpsStatus omps_parse_tsan(const char *raw_output,
                                const char *candidate_file,
                                struct OmpsRaceReport **out);

/**
 * Parses a race answer (prefix line plus JSON list).
 *
 * # Safety
 * As for [`omps_parse_tsan`].
 */
enum OmpsStatus omps_race_report_parse_answer(const char *text, struct OmpsRaceReport **out);

/**
 * # Safety
 * `report` must be a live handle; `out` must be writable.
 */
enum OmpsStatus omps_race_report_render(const struct OmpsRaceReport *report, char **out);

/**
 * Canonical JSON of the report.
 *
 * # Safety
 * As for [`omps_race_report_render`].
 */
enum OmpsStatus omps_race_report_to_json(const struct OmpsRaceReport *report, char **out);

/**
 * Number of findings; 0 for a null handle.
 *
 * # Safety
 * `report` must be a live handle or null.
 */
size_t omps_race_report_len(const struct OmpsRaceReport *report);

/**
 * # Safety
 * `report` must come from this library or be null.
 */
void omps_race_report_free(struct OmpsRaceReport *report);

/**
 * Parses a single-program Caliper answer.
 *
 * # Safety
 * `text` must be a valid NUL-terminated string; `out` must be writable.
 */
enum OmpsStatus omps_caliper_profile_parse_answer(const char *text,
                                                  struct OmpsCaliperProfile **out);

/**
 * Renders `profile` as an answer, quoting each region's lines of `code`.
 *
 * # Safety
 * `profile` must be a live handle, `code` a valid string, `spans` an array
 * of `n_spans` entries (may be null when `n_spans` is 0).
 */
enum OmpsStatus omps_caliper_profile_render(const struct OmpsCaliperProfile *profile,
                                            const char *code,
                                            const struct OmpsSpan *spans,
                                            size_t n_spans,
                                            char **out);

/**
 * Work % of `region` at `thread_count`; false when absent or failed.
 *
 * # Safety
 * `profile` must be a live handle, `region` a valid string, `out` writable.
 */
bool omps_caliper_profile_work(const struct OmpsCaliperProfile *profile,
                               const char *region,
                               uint32_t thread_count,
                               double *out);

/**
 * # Safety
 * `profile` must come from this library or be null.
 */
void omps_caliper_profile_free(struct OmpsCaliperProfile *profile);

/**
 * Wraps each span in Caliper begin/end markers and adds the header.
 *
 * # Safety
 * As for [`omps_caliper_profile_render`].
 */
enum OmpsStatus omps_instrument(const char *code,
                                const struct OmpsSpan *spans,
                                size_t n_spans,
                                char **out);

/**
 * Removes markers and the header inserted by [`omps_instrument`].
 *
 * # Safety
 * `code` must be a valid string; `out` writable.
 */
enum OmpsStatus omps_strip_markers(const char *code, char **out);

/**
 * Checks that markers pair up and nest; `Format` otherwise.
 *
 * # Safety
 * `code` must be a valid string.
 */
enum OmpsStatus omps_check_marker_nesting(const char *code);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OMPSYNTH_H */
