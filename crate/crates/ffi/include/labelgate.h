#ifndef LABELGATE_H
#define LABELGATE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every `lg_*` function.
 */
typedef enum LgStatus {
  LG_STATUS_OK = 0,
  LG_STATUS_NULL_ARGUMENT = 1,
  LG_STATUS_INVALID_UTF8 = 2,
  LG_STATUS_PARSE_ERROR = 3,
  LG_STATUS_UNKNOWN_SESSION = 4,
  LG_STATUS_UNKNOWN_TOOL = 5,
  LG_STATUS_SESSION_CLOSED = 6,
  LG_STATUS_UNKNOWN_PENDING = 7,
  LG_STATUS_ALREADY_RESOLVED = 8,
  LG_STATUS_NOT_OWNER = 9,
  LG_STATUS_BACKEND_FAILURE = 10,
  LG_STATUS_PROVENANCE = 11,
  LG_STATUS_VERIFY_ERROR = 12,
  LG_STATUS_INTERNAL = 13,
  LG_STATUS_PANIC = 14,
} LgStatus;

/**
 * Opaque gateway handle.
 */
typedef struct LgGateway LgGateway;

/**
 * Tool callback. Receives the tool name and its arguments as a JSON
 * object, returns the result as JSON, or NULL on failure. The returned
 * string stays owned by the callee; it is copied before `release` (if
 * given) is called with it. Called from whichever thread drives the
 * gateway, so it must be thread-safe.
 */
typedef const char *(*LgInvokeFn)(void *user_data, const char *tool, const char *arguments_json);

typedef void (*LgReleaseFn)(void *user_data, const char *result);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Create a gateway whose tools run through `invoke`. `policy_json` and
 * `config_json` may be NULL (empty policy, defaults). Config keys:
 * `internal_domains`, `timeout_secs`, `audit_dir`.
 */
enum LgStatus lg_gateway_new(const char *manifest_json,
                             const char *policy_json,
                             const char *config_json,
                             LgInvokeFn invoke,
                             LgReleaseFn release,
                             void *user_data,
                             struct LgGateway **out);

/**
 * Create a gateway over the built-in mock calendar and mailbox, one fresh
 * copy per session.
 */
enum LgStatus lg_gateway_new_mock(const char *manifest_json,
                                  const char *policy_json,
                                  const char *config_json,
                                  struct LgGateway **out);

void lg_gateway_free(struct LgGateway *gw);

/**
 * Open a session owned by `owner`; writes its id.
 */
enum LgStatus lg_session_open(const struct LgGateway *gw, const char *owner, char **out_session_id);

/**
 * Propose a call `{"tool", "arguments", "provenance"?}`; writes the
 * outcome JSON (`{"outcome": "executed" | "blocked" | ...}`).
 */
enum LgStatus lg_intercept(const struct LgGateway *gw,
                           const char *session_id,
                           const char *call_json,
                           char **out_outcome);

/**
 * Resolve a confirmation with `"approve"` or `"deny"`.
 */
enum LgStatus lg_resolve(const struct LgGateway *gw,
                         const char *pending_id,
                         const char *decision,
                         const char *authorizer,
                         char **out_outcome);

/**
 * Unresolved confirmations across sessions, as a JSON array.
 */
enum LgStatus lg_pending(const struct LgGateway *gw, char **out_json);

/**
 * Mask context items; `ids_json` is a JSON array of item ids.
 */
enum LgStatus lg_mask(const struct LgGateway *gw, const char *session_id, const char *ids_json);

/**
 * The session's context items with labels, as a JSON array.
 */
enum LgStatus lg_context(const struct LgGateway *gw, const char *session_id, char **out_json);

/**
 * Close a session; writes the close report.
 */
enum LgStatus lg_session_close(const struct LgGateway *gw,
                               const char *session_id,
                               char **out_report);

/**
 * The session's audit log as JSONL (header line first).
 */
enum LgStatus lg_audit_log(const struct LgGateway *gw, const char *session_id, char **out_jsonl);

/**
 * Replay an audit log; writes the replay report. A decision mismatch or a
 * corrupt log yields `LG_STATUS_PARSE_ERROR` with details in the last error.
 */
enum LgStatus lg_replay(const char *log_jsonl, char **out_report);

/**
 * Run the bounded checker. Options (all optional): `hazards` (array of
 * names), `bound`, `universe`, `deny_only`, `internal_domains`. Writes
 * `{verdict, bound, states, counterexample?}`.
 */
enum LgStatus lg_verify(const char *manifest_json,
                        const char *policy_json,
                        const char *options_json,
                        char **out_report);

/**
 * Lint a manifest; writes a JSON array of diagnostics.
 */
enum LgStatus lg_lint(const char *manifest_json, char **out_json);

/**
 * Message for the last failure on this thread, or NULL. Valid until the
 * next `lg_*` call on the same thread.
 */
const char *lg_last_error(void);

void lg_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LABELGATE_H */
