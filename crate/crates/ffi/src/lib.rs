//! C ABI over the labelgate gateway and verifier.
//!
//! Structured values cross the boundary as JSON strings. Every function
//! returns an [`LgStatus`]; on failure [`lg_last_error`] describes what went
//! wrong on the calling thread. Strings handed out through `out` pointers are
//! owned by the caller and must be released with [`lg_string_free`].
//!
//! # Safety
//!
//! Every string argument must be NULL or a valid NUL-terminated string, and
//! every handle must come from `lg_gateway_new*` and not yet be freed. Handles
//! may be shared across threads; the gateway locks internally.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use labelgate::gateway::{
    backend, replay, BackendError, BackendFactory, Gateway, GatewayConfig, GatewayError, Resolution, ToolBackend,
};
use labelgate::harness::MockFleet;
use labelgate::label::Principal;
use labelgate::manifest::{lint_manifest, parse_manifest, ManifestSet};
use labelgate::policy::{parse_policy, PolicySet};
use labelgate::verifier::{self, ConfirmationMode, Hazard, VerifyConfig};
use labelgate::ToolCall;
use serde_json::{json, Map, Value};

/// Result code of every `lg_*` function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    UnknownSession = 4,
    UnknownTool = 5,
    SessionClosed = 6,
    UnknownPending = 7,
    AlreadyResolved = 8,
    NotOwner = 9,
    BackendFailure = 10,
    Provenance = 11,
    VerifyError = 12,
    Internal = 13,
    Panic = 14,
}

/// Tool callback. Receives the tool name and its arguments as a JSON
/// object, returns the result as JSON, or NULL on failure. The returned
/// string stays owned by the callee; it is copied before `release` (if
/// given) is called with it. Called from whichever thread drives the
/// gateway, so it must be thread-safe.
pub type LgInvokeFn = Option<
    unsafe extern "C" fn(user_data: *mut c_void, tool: *const c_char, arguments_json: *const c_char) -> *const c_char,
>;

pub type LgReleaseFn = Option<unsafe extern "C" fn(user_data: *mut c_void, result: *const c_char)>;

/// Opaque gateway handle.
pub struct LgGateway {
    inner: Gateway,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(LgStatus, String);

impl From<GatewayError> for Failure {
    fn from(e: GatewayError) -> Self {
        let status = match &e {
            GatewayError::UnknownTool(_) => LgStatus::UnknownTool,
            GatewayError::UnknownSession(_) => LgStatus::UnknownSession,
            GatewayError::SessionClosed => LgStatus::SessionClosed,
            GatewayError::BackendFailure(_) => LgStatus::BackendFailure,
            GatewayError::Provenance(_) => LgStatus::Provenance,
            GatewayError::UnknownPending(_) => LgStatus::UnknownPending,
            GatewayError::AlreadyResolved(_) => LgStatus::AlreadyResolved,
            GatewayError::NotOwner => LgStatus::NotOwner,
            GatewayError::Audit(_) => LgStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn parse_err(e: impl ToString) -> Failure {
    Failure(LgStatus::ParseError, e.to_string())
}

/// Run `f`, turning errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LgStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside labelgate");
            LgStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(LgStatus::NullArgument, format!("{what} is NULL")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(LgStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn opt_text<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, what).map(Some)
    }
}

unsafe fn give(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(LgStatus::NullArgument, "out is NULL".into()));
    }
    let c = CString::new(s).map_err(|_| Failure(LgStatus::Internal, "interior NUL in output".into()))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn gateway<'a>(gw: *const LgGateway) -> Result<&'a Gateway, Failure> {
    gw.as_ref().map(|g| &g.inner).ok_or_else(|| Failure(LgStatus::NullArgument, "gateway is NULL".into()))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string(v).map_err(|e| Failure(LgStatus::Internal, e.to_string()))
}

struct Callback {
    invoke: unsafe extern "C" fn(*mut c_void, *const c_char, *const c_char) -> *const c_char,
    release: LgReleaseFn,
    user_data: *mut c_void,
}

// The caller promises a thread-safe callback (see `LgInvokeFn`).
unsafe impl Send for Callback {}
unsafe impl Sync for Callback {}

impl ToolBackend for Callback {
    fn invoke(&self, tool: &str, arguments: &Map<String, Value>) -> Result<Value, BackendError> {
        let tool_c = CString::new(tool).map_err(|e| BackendError(e.to_string()))?;
        let args_c =
            CString::new(Value::Object(arguments.clone()).to_string()).map_err(|e| BackendError(e.to_string()))?;
        // SAFETY: pointers are valid NUL-terminated strings for the call.
        let raw = unsafe { (self.invoke)(self.user_data, tool_c.as_ptr(), args_c.as_ptr()) };
        if raw.is_null() {
            return Err(BackendError(format!("callback failed for `{tool}`")));
        }
        // SAFETY: the callee returns a NUL-terminated string it keeps alive until release.
        let parsed = unsafe { CStr::from_ptr(raw) }
            .to_str()
            .map_err(|_| BackendError("callback result is not UTF-8".into()))
            .and_then(|s| serde_json::from_str(s).map_err(|e| BackendError(format!("callback result: {e}"))));
        if let Some(release) = self.release {
            unsafe { release(self.user_data, raw) };
        }
        parsed
    }
}

fn policy_from(text: Option<&str>, manifests: &ManifestSet) -> Result<PolicySet, Failure> {
    match text {
        Some(t) => parse_policy(t, manifests).map_err(parse_err),
        None => Ok(PolicySet::empty()),
    }
}

fn config_from(json: Option<&str>) -> Result<GatewayConfig, Failure> {
    let mut config = GatewayConfig::default();
    let Some(text) = json else { return Ok(config) };
    let v: Value = serde_json::from_str(text).map_err(parse_err)?;
    if let Some(d) = v.get("internal_domains") {
        config.internal_domains = serde_json::from_value(d.clone()).map_err(parse_err)?;
    }
    if let Some(t) = v.get("timeout_secs").and_then(Value::as_i64) {
        config.confirmation_timeout = chrono::Duration::seconds(t);
    }
    if let Some(p) = v.get("audit_dir").and_then(Value::as_str) {
        config.audit_dir = Some(p.into());
    }
    Ok(config)
}

unsafe fn build(
    manifest_json: *const c_char,
    policy_json: *const c_char,
    config_json: *const c_char,
    backends: BackendFactory,
    out: *mut *mut LgGateway,
) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(LgStatus::NullArgument, "out is NULL".into()));
    }
    let manifests = ManifestSet::parse(text(manifest_json, "manifest_json")?).map_err(parse_err)?;
    let policy = policy_from(opt_text(policy_json, "policy_json")?, &manifests)?;
    let config = config_from(opt_text(config_json, "config_json")?)?;
    let gw = Box::new(LgGateway { inner: Gateway::new(manifests, policy, config, backends) });
    *out = Box::into_raw(gw);
    Ok(())
}

/// Create a gateway whose tools run through `invoke`. `policy_json` and
/// `config_json` may be NULL (empty policy, defaults). Config keys:
/// `internal_domains`, `timeout_secs`, `audit_dir`.
#[no_mangle]
pub unsafe extern "C" fn lg_gateway_new(
    manifest_json: *const c_char,
    policy_json: *const c_char,
    config_json: *const c_char,
    invoke: LgInvokeFn,
    release: LgReleaseFn,
    user_data: *mut c_void,
    out: *mut *mut LgGateway,
) -> LgStatus {
    guard(|| {
        let invoke = invoke.ok_or_else(|| Failure(LgStatus::NullArgument, "invoke is NULL".into()))?;
        let cb: Arc<dyn ToolBackend> = Arc::new(Callback { invoke, release, user_data });
        build(manifest_json, policy_json, config_json, backend::shared(cb), out)
    })
}

/// Create a gateway over the built-in mock calendar and mailbox, one fresh
/// copy per session.
#[no_mangle]
pub unsafe extern "C" fn lg_gateway_new_mock(
    manifest_json: *const c_char,
    policy_json: *const c_char,
    config_json: *const c_char,
    out: *mut *mut LgGateway,
) -> LgStatus {
    guard(|| build(manifest_json, policy_json, config_json, MockFleet::default().factory(), out))
}

#[no_mangle]
pub unsafe extern "C" fn lg_gateway_free(gw: *mut LgGateway) {
    if !gw.is_null() {
        drop(Box::from_raw(gw));
    }
}

/// Open a session owned by `owner`; writes its id.
#[no_mangle]
pub unsafe extern "C" fn lg_session_open(
    gw: *const LgGateway,
    owner: *const c_char,
    out_session_id: *mut *mut c_char,
) -> LgStatus {
    guard(|| {
        let owner = Principal::new(text(owner, "owner")?).map_err(parse_err)?;
        let sid = gateway(gw)?.open_session(owner)?;
        give(out_session_id, sid)
    })
}

/// Propose a call `{"tool", "arguments", "provenance"?}`; writes the
/// outcome JSON (`{"outcome": "executed" | "blocked" | ...}`).
#[no_mangle]
pub unsafe extern "C" fn lg_intercept(
    gw: *const LgGateway,
    session_id: *const c_char,
    call_json: *const c_char,
    out_outcome: *mut *mut c_char,
) -> LgStatus {
    guard(|| {
        let call: ToolCall = serde_json::from_str(text(call_json, "call_json")?).map_err(parse_err)?;
        let outcome = gateway(gw)?.intercept(text(session_id, "session_id")?, call)?;
        give(out_outcome, to_json(&outcome)?)
    })
}

/// Resolve a confirmation with `"approve"` or `"deny"`.
#[no_mangle]
pub unsafe extern "C" fn lg_resolve(
    gw: *const LgGateway,
    pending_id: *const c_char,
    decision: *const c_char,
    authorizer: *const c_char,
    out_outcome: *mut *mut c_char,
) -> LgStatus {
    guard(|| {
        let decision: Resolution = serde_json::from_value(json!(text(decision, "decision")?)).map_err(parse_err)?;
        let who = Principal::new(text(authorizer, "authorizer")?).map_err(parse_err)?;
        let outcome = gateway(gw)?.resolve_confirmation(text(pending_id, "pending_id")?, decision, &who)?;
        give(out_outcome, to_json(&outcome)?)
    })
}

/// Unresolved confirmations across sessions, as a JSON array.
#[no_mangle]
pub unsafe extern "C" fn lg_pending(gw: *const LgGateway, out_json: *mut *mut c_char) -> LgStatus {
    guard(|| give(out_json, to_json(&gateway(gw)?.pending()?)?))
}

/// Mask context items; `ids_json` is a JSON array of item ids.
#[no_mangle]
pub unsafe extern "C" fn lg_mask(gw: *const LgGateway, session_id: *const c_char, ids_json: *const c_char) -> LgStatus {
    guard(|| {
        let ids = serde_json::from_str(text(ids_json, "ids_json")?).map_err(parse_err)?;
        gateway(gw)?.mask(text(session_id, "session_id")?, &ids)?;
        Ok(())
    })
}

/// The session's context items with labels, as a JSON array.
#[no_mangle]
pub unsafe extern "C" fn lg_context(
    gw: *const LgGateway,
    session_id: *const c_char,
    out_json: *mut *mut c_char,
) -> LgStatus {
    guard(|| give(out_json, to_json(&gateway(gw)?.context(text(session_id, "session_id")?)?)?))
}

/// Close a session; writes the close report.
#[no_mangle]
pub unsafe extern "C" fn lg_session_close(
    gw: *const LgGateway,
    session_id: *const c_char,
    out_report: *mut *mut c_char,
) -> LgStatus {
    guard(|| give(out_report, to_json(&gateway(gw)?.close_session(text(session_id, "session_id")?)?)?))
}

/// The session's audit log as JSONL (header line first).
#[no_mangle]
pub unsafe extern "C" fn lg_audit_log(
    gw: *const LgGateway,
    session_id: *const c_char,
    out_jsonl: *mut *mut c_char,
) -> LgStatus {
    guard(|| give(out_jsonl, gateway(gw)?.audit_log(text(session_id, "session_id")?)?))
}

/// Replay an audit log; writes the replay report. A decision mismatch or a
/// corrupt log yields `LG_STATUS_PARSE_ERROR` with details in the last error.
#[no_mangle]
pub unsafe extern "C" fn lg_replay(log_jsonl: *const c_char, out_report: *mut *mut c_char) -> LgStatus {
    guard(|| {
        let report = replay(text(log_jsonl, "log_jsonl")?).map_err(parse_err)?;
        give(out_report, to_json(&report)?)
    })
}

/// Run the bounded checker. Options (all optional): `hazards` (array of
/// names), `bound`, `universe`, `deny_only`, `internal_domains`. Writes
/// `{verdict, bound, states, counterexample?}`.
#[no_mangle]
pub unsafe extern "C" fn lg_verify(
    manifest_json: *const c_char,
    policy_json: *const c_char,
    options_json: *const c_char,
    out_report: *mut *mut c_char,
) -> LgStatus {
    guard(|| {
        let manifests = ManifestSet::parse(text(manifest_json, "manifest_json")?).map_err(parse_err)?;
        let policy = policy_from(opt_text(policy_json, "policy_json")?, &manifests)?;
        let opts: Value = match opt_text(options_json, "options_json")? {
            Some(t) => serde_json::from_str(t).map_err(parse_err)?,
            None => json!({}),
        };
        let mut config = VerifyConfig::default();
        if let Some(b) = opts.get("bound").and_then(Value::as_u64) {
            config.bound = b as usize;
        }
        if let Some(u) = opts.get("universe").and_then(Value::as_u64) {
            config.universe = u as usize;
        }
        if opts.get("deny_only").and_then(Value::as_bool) == Some(true) {
            config.confirmations = ConfirmationMode::DenyOnly;
        }
        if let Some(d) = opts.get("internal_domains") {
            config.internal_domains = serde_json::from_value(d.clone()).map_err(parse_err)?;
        }
        let hazards: Vec<Hazard> = match opts.get("hazards").and_then(Value::as_array) {
            None => vec![Hazard::PrivateLeak],
            Some(names) => names
                .iter()
                .map(|n| n.as_str().unwrap_or_default().parse::<Hazard>())
                .collect::<Result<_, _>>()
                .map_err(parse_err)?,
        };
        let result = verifier::check(&manifests, &policy, &hazards, &config)
            .map_err(|e| Failure(LgStatus::VerifyError, e.to_string()))?;
        give(out_report, result.report().to_string())
    })
}

/// Lint a manifest; writes a JSON array of diagnostics.
#[no_mangle]
pub unsafe extern "C" fn lg_lint(manifest_json: *const c_char, out_json: *mut *mut c_char) -> LgStatus {
    guard(|| {
        let tools = parse_manifest(text(manifest_json, "manifest_json")?).map_err(parse_err)?;
        give(out_json, to_json(&lint_manifest(&tools))?)
    })
}

/// Message for the last failure on this thread, or NULL. Valid until the
/// next `lg_*` call on the same thread.
#[no_mangle]
pub extern "C" fn lg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub unsafe extern "C" fn lg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
