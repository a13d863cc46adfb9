#ifndef WISECR_H
#define WISECR_H

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Zero is success, failures are negative.
 */
enum WisecrStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  WISECR_STATUS_OK = 0,
  WISECR_STATUS_NULL_POINTER = -1,
  WISECR_STATUS_INVALID_UTF8 = -2,
  WISECR_STATUS_CONFIG = -3,
  WISECR_STATUS_IO = -4,
  WISECR_STATUS_CRYPTO = -5,
  WISECR_STATUS_BUFFER_TOO_SMALL = -6,
  WISECR_STATUS_PANIC = -7,
};
#ifndef __cplusplus
typedef int32_t WisecrStatus;
#endif // __cplusplus

/**
 * Opaque result of one simulated update session.
 */
typedef struct WisecrReport WisecrReport;

/**
 * Opaque scenario handle.
 */
typedef struct WisecrScenario WisecrScenario;

/**
 * Execution schedule for a measured Vt. `t_active_ms` is 0 for
 * continuous execution.
 */
typedef struct WisecrPam {
  uint16_t t_active_ms;
  uint16_t t_lpm_ms;
  bool update_advised;
} WisecrPam;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated.
 *
 * # Safety
 * `buf` must be writable for `cap` bytes and `written` writable.
 */
int32_t wisecr_last_error(char *buf, size_t cap, size_t *written);

/**
 * Loads a TOML or JSON scenario file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
int32_t wisecr_scenario_load(const char *path, struct WisecrScenario **out);

/**
 * Parses scenario text; `origin` names it in diagnostics and may be null.
 *
 * # Safety
 * `text` and a non-null `origin` must be NUL-terminated; `out` writable.
 */
int32_t wisecr_scenario_parse(const char *text, const char *origin, struct WisecrScenario **out);

/**
 * # Safety
 * `sc` must come from a scenario constructor and not be freed twice.
 */
void wisecr_scenario_free(struct WisecrScenario *sc);

/**
 * Simulates one update session of `sc` under `seed`.
 *
 * # Safety
 * `sc` must be a live scenario handle and `out` writable.
 */
int32_t wisecr_run(const struct WisecrScenario *sc, uint64_t seed, struct WisecrReport **out);

/**
 * # Safety
 * `r` must come from `wisecr_run` and not be freed twice.
 */
void wisecr_report_free(struct WisecrReport *r);

/**
 * Latency in seconds, throughput in bit/s, updated token count and
 * attempts used. Any out pointer may be null.
 *
 * # Safety
 * `r` must be a live report handle; non-null out pointers writable.
 */
int32_t wisecr_report_summary(const struct WisecrReport *r,
                              double *latency_s,
                              double *throughput_bps,
                              size_t *updated,
                              uint32_t *attempts);

/**
 * The report as a CSV header plus one row, not NUL-terminated.
 *
 * # Safety
 * `r` must be a live report handle; `buf` writable for `cap` bytes.
 */
int32_t wisecr_report_csv(const struct WisecrReport *r, uint8_t *buf, size_t cap, size_t *written);

/**
 * CMAC over `msg` under a 16-byte key, written to 16-byte `tag`.
 *
 * # Safety
 * `key` readable for 16 bytes, `msg` for `len`, `tag` writable for 16.
 */
int32_t wisecr_mac_compute(const uint8_t *key, const uint8_t *msg, size_t len, uint8_t *tag);

/**
 * Constant-time tag check; `valid` receives the verdict.
 *
 * # Safety
 * `key` and `tag` readable for 16 bytes, `msg` for `len`, `valid` writable.
 */
int32_t wisecr_mac_verify(const uint8_t *key,
                          const uint8_t *msg,
                          size_t len,
                          const uint8_t *tag,
                          bool *valid);

/**
 * CBC-encrypts with length padding. Output is `len` rounded up to the
 * next multiple of 16, plus 16 when `len` already is one.
 *
 * # Safety
 * `key` and `iv` readable for 16 bytes, `pt` for `len`, `out` writable for `cap`.
 */
int32_t wisecr_encrypt(const uint8_t *key,
                       const uint8_t *iv,
                       const uint8_t *pt,
                       size_t len,
                       uint8_t *out,
                       size_t cap,
                       size_t *written);

/**
 * Inverse of `wisecr_encrypt`; fails with `Crypto` on bad length or padding.
 *
 * # Safety
 * `key` and `iv` readable for 16 bytes, `ct` for `len`, `out` writable for `cap`.
 */
int32_t wisecr_decrypt(const uint8_t *key,
                       const uint8_t *iv,
                       const uint8_t *ct,
                       size_t len,
                       uint8_t *out,
                       size_t cap,
                       size_t *written);

/**
 * Execution schedule for a SNIFF reading `vt` in volts.
 *
 * # Safety
 * `out` must be writable.
 */
int32_t wisecr_pam_get(double vt, struct WisecrPam *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WISECR_H */
