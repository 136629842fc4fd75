//! Network front ends of the gateway.
//!
//! Agents speak JSON-RPC 2.0, over HTTP (`POST /rpc`) or line-delimited over
//! stdio. The confirmation console gets a small REST surface:
//!
//! | route | purpose |
//! |---|---|
//! | `GET /pending` | unresolved confirmations with their flow summaries |
//! | `POST /pending/{id}/resolve` | `{"decision": "approve" \| "deny"}` |
//! | `GET /sessions/{id}/trace` | the session's events as JSONL |
//! | `GET /healthz` | liveness |
//!
//! When an owner token is configured, console routes require
//! `Authorization: Bearer <token>`.

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};

use crate::call::{Provenance, ToolCall};
use crate::gateway::{Gateway, GatewayError, Outcome, Resolution};
use crate::label::Principal;

pub const SESSION_HEADER: &str = "mcp-session-id";

/// JSON-RPC error code for calls the policy refused or suspended.
pub const POLICY_ERROR: i64 = -32001;

pub struct AppState {
    pub gateway: Arc<Gateway>,
    pub owner: Principal,
    pub token: Option<String>,
}

impl AppState {
    pub fn new(gateway: Arc<Gateway>, owner: Principal, token: Option<String>) -> Arc<Self> {
        Arc::new(AppState { gateway, owner, token })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/rpc", post(rpc_http))
        .route("/pending", get(list_pending))
        .route("/pending/{id}/resolve", post(resolve))
        .route("/sessions/{id}/trace", get(trace))
        .route("/healthz", get(|| async { Json(json!({"status": "ok"})) }))
        .with_state(state)
}

fn rpc_error(id: &Value, code: i64, message: impl Into<String>, data: Option<Value>) -> Value {
    let mut err = json!({"code": code, "message": message.into()});
    if let Some(d) = data {
        err["data"] = d;
    }
    json!({"jsonrpc": "2.0", "id": id, "error": err})
}

fn rpc_ok(id: &Value, result: Value) -> Value {
    json!({"jsonrpc": "2.0", "id": id, "result": result})
}

fn gateway_error(id: &Value, e: &GatewayError) -> Value {
    let code = match e {
        GatewayError::UnknownTool(_) => -32602,
        GatewayError::UnknownSession(_) | GatewayError::SessionClosed => -32002,
        _ => -32603,
    };
    rpc_error(id, code, e.to_string(), None)
}

/// The agent-visible form of an outcome. Refusals name the rule, never the
/// labels of other context items.
fn outcome_response(gw: &Gateway, id: &Value, outcome: Outcome) -> Value {
    match outcome {
        Outcome::Executed { call_id, result, items } => {
            let text = serde_json::to_string(&result).unwrap_or_default();
            rpc_ok(
                id,
                json!({
                    "content": [{"type": "text", "text": text}],
                    "structuredContent": result,
                    "call_id": call_id,
                    "items": items,
                }),
            )
        }
        Outcome::Blocked { rule } => {
            rpc_error(id, POLICY_ERROR, "blocked by policy", Some(json!({"code": "blocked", "rule": rule})))
        }
        Outcome::ObligationRefused { obligation } => rpc_error(
            id,
            POLICY_ERROR,
            "refused: an obligation is outstanding",
            Some(json!({"code": "obligation_refused", "rule": obligation})),
        ),
        Outcome::Pending { pending_id } => {
            let rule = gw.pending_status(&pending_id).map(|p| p.rule).unwrap_or_default();
            rpc_error(
                id,
                POLICY_ERROR,
                "awaiting owner confirmation",
                Some(json!({"code": "pending", "rule": rule, "pending_id": pending_id})),
            )
        }
        Outcome::Denied { pending_id } => {
            let rule = gw.pending_status(&pending_id).map(|p| p.rule).unwrap_or_default();
            rpc_error(
                id,
                POLICY_ERROR,
                "denied by owner",
                Some(json!({"code": "denied", "rule": rule, "pending_id": pending_id})),
            )
        }
    }
}

#[derive(Deserialize)]
struct CallParams {
    name: String,
    #[serde(default)]
    arguments: serde_json::Map<String, Value>,
    #[serde(default)]
    provenance: Provenance,
    #[serde(default)]
    session_id: Option<String>,
}

/// Dispatch one JSON-RPC message. `session` is the caller's session, if it
/// has one; `initialize` opens a new one. Returns `None` for notifications.
pub fn handle_rpc(state: &AppState, session: Option<&str>, msg: &Value) -> Option<Value> {
    let gw = &state.gateway;
    let id = msg.get("id").cloned();
    let Some(method) = msg.get("method").and_then(Value::as_str) else {
        return Some(rpc_error(&id.unwrap_or(Value::Null), -32600, "invalid request", None));
    };
    let id = id?;
    let params = msg.get("params").cloned().unwrap_or(Value::Null);
    let session = params.get("session_id").and_then(Value::as_str).or(session).map(str::to_owned);
    let need_session = || session.clone().ok_or(());
    let response = match method {
        "initialize" => match gw.open_session(state.owner.clone()) {
            Ok(sid) => rpc_ok(
                &id,
                json!({
                    "protocolVersion": "2025-06-18",
                    "serverInfo": {"name": "labelgate", "version": env!("CARGO_PKG_VERSION")},
                    "capabilities": {"tools": {}},
                    "session_id": sid,
                }),
            ),
            Err(e) => gateway_error(&id, &e),
        },
        "ping" => rpc_ok(&id, json!({})),
        "tools/list" => rpc_ok(&id, json!({"tools": gw.manifests().to_json()["tools"]})),
        "tools/call" => {
            let p: CallParams = match serde_json::from_value(params) {
                Ok(p) => p,
                Err(e) => return Some(rpc_error(&id, -32602, format!("invalid params: {e}"), None)),
            };
            let Some(sid) = p.session_id.or(session) else {
                return Some(rpc_error(&id, -32002, "no session; call initialize first", None));
            };
            let call = ToolCall { tool: p.name, arguments: p.arguments, provenance: p.provenance };
            match gw.intercept(&sid, call) {
                Ok(outcome) => outcome_response(gw, &id, outcome),
                Err(e) => gateway_error(&id, &e),
            }
        }
        "pending/status" => {
            let Some(pid) = params.get("pending_id").and_then(Value::as_str) else {
                return Some(rpc_error(&id, -32602, "missing pending_id", None));
            };
            match gw.pending_status(pid) {
                None => gateway_error(&id, &GatewayError::UnknownPending(pid.to_owned())),
                Some(p) => match p.outcome {
                    Some(outcome) => outcome_response(gw, &id, outcome),
                    None => outcome_response(gw, &id, Outcome::Pending { pending_id: pid.to_owned() }),
                },
            }
        }
        "context/list" | "context/mask" | "session/close" => {
            let Ok(sid) = need_session() else {
                return Some(rpc_error(&id, -32002, "no session; call initialize first", None));
            };
            let result = match method {
                "context/list" => gw.context(&sid).map(|items| json!({"items": items})),
                "context/mask" => {
                    let ids = serde_json::from_value(params.get("ids").cloned().unwrap_or(json!([])));
                    match ids {
                        Ok(ids) => gw.mask(&sid, &ids).map(|_| json!({"masked": true})),
                        Err(e) => return Some(rpc_error(&id, -32602, format!("invalid ids: {e}"), None)),
                    }
                }
                _ => gw.close_session(&sid).map(|r| serde_json::to_value(r).unwrap_or_default()),
            };
            match result {
                Ok(v) => rpc_ok(&id, v),
                Err(e) => gateway_error(&id, &e),
            }
        }
        other => rpc_error(&id, -32601, format!("method not found: {other}"), None),
    };
    Some(response)
}

async fn rpc_http(State(state): State<Arc<AppState>>, headers: HeaderMap, body: String) -> Response {
    let msg: Value = match serde_json::from_str(&body) {
        Ok(v) => v,
        Err(e) => return Json(rpc_error(&Value::Null, -32700, format!("parse error: {e}"), None)).into_response(),
    };
    let session = headers.get(SESSION_HEADER).and_then(|v| v.to_str().ok()).map(str::to_owned);
    let st = state.clone();
    let reply = tokio::task::spawn_blocking(move || handle_rpc(&st, session.as_deref(), &msg)).await;
    match reply {
        Ok(Some(v)) => {
            let sid = v.pointer("/result/session_id").and_then(Value::as_str).map(str::to_owned);
            let mut resp = Json(v).into_response();
            if let Some(sid) = sid.and_then(|s| s.parse().ok()) {
                resp.headers_mut().insert(SESSION_HEADER, sid);
            }
            resp
        }
        Ok(None) => StatusCode::ACCEPTED.into_response(),
        Err(_) => StatusCode::INTERNAL_SERVER_ERROR.into_response(),
    }
}

fn authorized(state: &AppState, headers: &HeaderMap) -> bool {
    let Some(token) = &state.token else { return true };
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == token)
}

fn api_error(status: StatusCode, code: &str, message: String) -> Response {
    (status, Json(json!({"error": code, "message": message}))).into_response()
}

fn unauthorized() -> Response {
    api_error(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong owner token".into())
}

async fn list_pending(State(state): State<Arc<AppState>>, headers: HeaderMap) -> Response {
    if !authorized(&state, &headers) {
        return unauthorized();
    }
    match state.gateway.pending() {
        Ok(p) => Json(p).into_response(),
        Err(e) => api_error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

#[derive(Deserialize)]
struct ResolveBody {
    decision: Resolution,
}

async fn resolve(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Option<Json<ResolveBody>>,
) -> Response {
    if !authorized(&state, &headers) {
        return unauthorized();
    }
    let Some(Json(body)) = body else {
        return api_error(
            StatusCode::BAD_REQUEST,
            "bad_request",
            "expected {\"decision\": \"approve\"|\"deny\"}".into(),
        );
    };
    let st = state.clone();
    let res = tokio::task::spawn_blocking(move || {
        let owner = match st.gateway.pending_status(&id) {
            Some(p) => st.gateway.owner(&p.session_id)?,
            None => return Err(GatewayError::UnknownPending(id)),
        };
        st.gateway.resolve_confirmation(&id, body.decision, &owner)
    })
    .await;
    match res {
        Ok(Ok(outcome)) => Json(outcome).into_response(),
        Ok(Err(e)) => {
            let (status, code) = match &e {
                GatewayError::UnknownPending(_) => (StatusCode::NOT_FOUND, "unknown_pending"),
                GatewayError::AlreadyResolved(_) => (StatusCode::CONFLICT, "already_resolved"),
                GatewayError::NotOwner => (StatusCode::FORBIDDEN, "not_owner"),
                GatewayError::BackendFailure(_) => (StatusCode::BAD_GATEWAY, "backend_failure"),
                _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            };
            api_error(status, code, e.to_string())
        }
        Err(_) => StatusCode::INTERNAL_SERVER_ERROR.into_response(),
    }
}

async fn trace(State(state): State<Arc<AppState>>, Path(id): Path<String>, headers: HeaderMap) -> Response {
    if !authorized(&state, &headers) {
        return unauthorized();
    }
    match state.gateway.trace(&id) {
        Ok(events) => {
            let mut body = String::new();
            for e in events {
                body.push_str(&serde_json::to_string(&e).unwrap_or_default());
                body.push('\n');
            }
            ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
        }
        Err(e) => api_error(StatusCode::NOT_FOUND, "unknown_session", e.to_string()),
    }
}

/// Serve the agent over stdin/stdout in one session until EOF.
pub async fn serve_stdio(state: Arc<AppState>) -> std::io::Result<()> {
    let sid = state.gateway.open_session(state.owner.clone()).map_err(std::io::Error::other)?;
    let mut lines = BufReader::new(tokio::io::stdin()).lines();
    let mut out = tokio::io::stdout();
    while let Some(line) = lines.next_line().await? {
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Value>(&line) {
            Err(e) => Some(rpc_error(&Value::Null, -32700, format!("parse error: {e}"), None)),
            Ok(msg) if msg.get("method").and_then(Value::as_str) == Some("initialize") => {
                // stdio carries exactly one session
                msg.get("id").map(|id| {
                    rpc_ok(
                        id,
                        json!({
                            "protocolVersion": "2025-06-18",
                            "serverInfo": {"name": "labelgate", "version": env!("CARGO_PKG_VERSION")},
                            "capabilities": {"tools": {}},
                            "session_id": sid,
                        }),
                    )
                })
            }
            Ok(msg) => {
                let st = state.clone();
                let sid = sid.clone();
                tokio::task::spawn_blocking(move || handle_rpc(&st, Some(&sid), &msg))
                    .await
                    .map_err(std::io::Error::other)?
            }
        };
        if let Some(v) = reply {
            let mut bytes = serde_json::to_vec(&v)?;
            bytes.push(b'\n');
            out.write_all(&bytes).await?;
            out.flush().await?;
        }
    }
    if !state.gateway.is_closed(&sid).unwrap_or(true) {
        let _ = state.gateway.close_session(&sid);
    }
    Ok(())
}
