//! The interception point between an agent and its tools.
//!
//! The agent only ever talks to a [`Gateway`]. For each proposed call the
//! gateway labels the arguments from the session's taint store, asks the
//! policy engine for a decision, and only then (on `Allow`, or after the
//! session owner approves a confirmation) invokes the backend. Every step is
//! appended to the session's audit log before the call returns.

mod audit;
pub mod backend;
mod replay;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use audit::{EventKind, LogHeader, TraceEvent, LOG_FORMAT};
pub use backend::{BackendError, BackendFactory, ToolBackend};
pub use replay::{replay, ReplayError, ReplayReport, ReplayedDecision};

use crate::call::{CallFingerprint, ExecutedCall, ItemId, ToolCall};
use crate::label::{LabelSet, Principal};
use crate::manifest::{ManifestSet, ToolManifest};
use crate::obligation::ObligationState;
use crate::policy::{evaluate, Decision, EvalInput, EvalSettings, PolicySet, Verdict};
use crate::provenance::{ArgumentLabels, ContextStore, DataItem, ProvenanceError};
use audit::AuditLog;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session is closed")]
    SessionClosed,
    #[error(transparent)]
    BackendFailure(#[from] BackendError),
    #[error(transparent)]
    Provenance(#[from] ProvenanceError),
    #[error("unknown pending confirmation `{0}`")]
    UnknownPending(String),
    #[error("pending confirmation `{0}` was already resolved")]
    AlreadyResolved(String),
    #[error("only the session owner may resolve confirmations")]
    NotOwner,
    #[error("audit log write failed: {0}")]
    Audit(#[from] std::io::Error),
}

/// Default suspension before an unanswered confirmation is auto-denied.
pub const DEFAULT_CONFIRMATION_TIMEOUT_SECS: i64 = 600;

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub internal_domains: Vec<String>,
    pub confirmation_timeout: Duration,
    /// Directory for per-session JSONL logs; in-memory only when `None`.
    pub audit_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            internal_domains: Vec::new(),
            confirmation_timeout: Duration::seconds(DEFAULT_CONFIRMATION_TIMEOUT_SECS),
            audit_dir: None,
        }
    }
}

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

/// What the agent gets back from a proposed call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    Executed { call_id: u64, result: Value, items: Vec<ItemId> },
    Blocked { rule: String },
    Pending { pending_id: String },
    ObligationRefused { obligation: String },
    Denied { pending_id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Approve,
    Deny,
}

/// One row of a confirmation's flow summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRow {
    pub item: ItemId,
    pub source: String,
    pub label: LabelSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub sink: String,
    pub capabilities: Vec<String>,
    pub recipients: Vec<Principal>,
    pub items: Vec<FlowRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingConfirmation {
    pub pending_id: String,
    pub session_id: String,
    pub call_id: u64,
    pub call: ToolCall,
    pub rule: String,
    pub summary: FlowSummary,
    pub created_at: DateTime<Utc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution: Option<Resolution>,
    /// What the call came to once resolved.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
}

/// One required call that never happened.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnmetObligation {
    pub obligation: String,
    pub trigger_call: u64,
    pub attendee: Principal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloseReport {
    pub session_id: String,
    pub auto_denied: Vec<String>,
    /// One entry per outstanding attendee of every open obligation.
    pub violations: Vec<UnmetObligation>,
}

impl CloseReport {
    pub fn is_clean(&self) -> bool {
        self.auto_denied.is_empty() && self.violations.is_empty()
    }
}

/// A context item as shown to the agent and the harness.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemView {
    #[serde(flatten)]
    pub item: DataItem,
    pub masked: bool,
}

struct Session {
    id: String,
    owner: Principal,
    context: ContextStore,
    obligations: ObligationState,
    log: AuditLog,
    backend: Arc<dyn ToolBackend>,
    next_call: u64,
    confirms: u64,
    closed: bool,
}

pub struct Gateway {
    manifests: Arc<ManifestSet>,
    policy: Arc<PolicySet>,
    settings: EvalSettings,
    config: GatewayConfig,
    backends: BackendFactory,
    clock: Clock,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    // lock order: a session before the queue
    queue: Mutex<BTreeMap<String, PendingConfirmation>>,
    next_session: AtomicU64,
}

impl Gateway {
    pub fn new(manifests: ManifestSet, policy: PolicySet, config: GatewayConfig, backends: BackendFactory) -> Self {
        let settings = EvalSettings::with_internal_domains(&config.internal_domains);
        Gateway {
            manifests: Arc::new(manifests),
            policy: Arc::new(policy),
            settings,
            config,
            backends,
            clock: Arc::new(Utc::now),
            sessions: RwLock::new(HashMap::new()),
            queue: Mutex::new(BTreeMap::new()),
            next_session: AtomicU64::new(0),
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn manifests(&self) -> &ManifestSet {
        &self.manifests
    }

    pub fn policy(&self) -> &PolicySet {
        &self.policy
    }

    fn now(&self) -> DateTime<Utc> {
        (self.clock)()
    }

    pub fn open_session(&self, owner: Principal) -> Result<String, GatewayError> {
        let n = self.next_session.fetch_add(1, Ordering::SeqCst) + 1;
        self.open_session_with_id(format!("s{n}"), owner)
    }

    /// Open a session under a caller-chosen id (must be unused).
    pub fn open_session_with_id(&self, id: String, owner: Principal) -> Result<String, GatewayError> {
        let header = LogHeader {
            format: LOG_FORMAT.into(),
            session_id: id.clone(),
            owner: owner.as_str().to_owned(),
            internal_domains: self.settings.internal_domains.clone(),
            opened_at: self.now().to_rfc3339(),
            manifests: self.manifests.to_json(),
            policy: self.policy.to_json(),
        };
        let log = AuditLog::open(header, self.config.audit_dir.as_deref())?;
        let session = Session {
            id: id.clone(),
            context: ContextStore::new(owner.clone()),
            owner,
            obligations: ObligationState::default(),
            log,
            backend: (self.backends)(&id),
            next_call: 0,
            confirms: 0,
            closed: false,
        };
        let mut sessions = self.sessions.write();
        if sessions.contains_key(&id) {
            return Err(GatewayError::UnknownSession(format!("{id} (already exists)")));
        }
        sessions.insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(id)
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, GatewayError> {
        self.sessions.read().get(id).cloned().ok_or_else(|| GatewayError::UnknownSession(id.to_owned()))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    fn log(&self, s: &mut Session, kind: EventKind, payload: Value) -> Result<u64, GatewayError> {
        Ok(s.log.append(kind, payload, self.now())?)
    }

    /// Intercept one proposed call and decide it before anything executes.
    pub fn intercept(&self, session_id: &str, call: ToolCall) -> Result<Outcome, GatewayError> {
        let session = self.session(session_id)?;
        let mut s = session.lock();
        if s.closed {
            return Err(GatewayError::SessionClosed);
        }
        self.expire_locked(&mut s)?;
        let manifest =
            self.manifests.get(&call.tool).ok_or_else(|| GatewayError::UnknownTool(call.tool.clone()))?.clone();
        s.next_call += 1;
        let call_id = s.next_call;
        let recipients = manifest.recipients(&call.arguments);
        self.log(
            &mut s,
            EventKind::CallProposed,
            json!({"call_id": call_id, "tool": call.tool, "arguments": call.arguments,
                   "provenance": call.provenance, "recipients": recipients}),
        )?;

        let fingerprint = call.fingerprint(&manifest);
        let labels = s.context.argument_labels(&call, &fingerprint)?;
        for item in &labels.consumed_grants {
            self.log(
                &mut s,
                EventKind::Declassify,
                json!({"action": "consumed", "via": "evaluation", "item": item, "fingerprint": fingerprint}),
            )?;
        }
        let candidate = format!("{}-p{}", s.id, s.confirms + 1);
        let decision = evaluate(
            EvalInput {
                manifest: &manifest,
                recipients: &recipients,
                arg_labels: &labels.effective,
                obligations: &s.obligations,
            },
            &self.policy,
            &self.settings,
            &candidate,
        );
        self.log(
            &mut s,
            EventKind::Decision,
            json!({"call_id": call_id, "decision": decision, "arg_labels": labels.effective, "raw_labels": labels.raw}),
        )?;

        match decision.verdict {
            Verdict::Allow => self.execute(&mut s, call_id, &call, &manifest, &recipients),
            Verdict::Block { rule } => Ok(Outcome::Blocked { rule }),
            Verdict::ObligationViolation { obligation } => Ok(Outcome::ObligationRefused { obligation }),
            Verdict::Confirm { pending_id, reason } => {
                s.confirms += 1;
                let summary = self.summarize(&s, &manifest, &recipients, &labels);
                let pending = PendingConfirmation {
                    pending_id: pending_id.clone(),
                    session_id: s.id.clone(),
                    call_id,
                    call,
                    rule: reason,
                    summary,
                    created_at: self.now(),
                    resolution: None,
                    outcome: None,
                };
                self.log(
                    &mut s,
                    EventKind::ConfirmationRequested,
                    json!({"pending_id": pending_id, "call_id": call_id, "rule": pending.rule, "summary": pending.summary}),
                )?;
                self.queue.lock().insert(pending_id.clone(), pending);
                Ok(Outcome::Pending { pending_id })
            }
        }
    }

    fn summarize(
        &self,
        s: &Session,
        manifest: &ToolManifest,
        recipients: &[Principal],
        labels: &ArgumentLabels,
    ) -> FlowSummary {
        let items = labels
            .contributing
            .iter()
            .filter_map(|id| s.context.get(id))
            .filter(|i| !i.label.is_bottom())
            .map(|i| FlowRow { item: i.id.clone(), source: source_name(i), label: i.label.clone() })
            .collect();
        FlowSummary {
            sink: manifest.tool_name.clone(),
            capabilities: manifest.capabilities.iter().map(|c| c.as_str().to_owned()).collect(),
            recipients: recipients.to_vec(),
            items,
        }
    }

    /// The single path by which a backend is invoked.
    fn execute(
        &self,
        s: &mut Session,
        call_id: u64,
        call: &ToolCall,
        manifest: &ToolManifest,
        recipients: &[Principal],
    ) -> Result<Outcome, GatewayError> {
        let result = match s.backend.invoke(&call.tool, &call.arguments) {
            Ok(r) => r,
            Err(e) => {
                self.log(
                    s,
                    EventKind::CallExecuted,
                    json!({"call_id": call_id, "tool": call.tool, "arguments": call.arguments, "error": e.0}),
                )?;
                return Err(e.into());
            }
        };
        self.log(
            s,
            EventKind::CallExecuted,
            json!({"call_id": call_id, "tool": call.tool, "arguments": call.arguments, "result": result}),
        )?;
        let ids = s.context.ingest_output(call, &result, manifest)?;
        let items: Vec<&DataItem> = ids.iter().filter_map(|id| s.context.get(id)).collect();
        let payload = json!({"call_id": call_id, "items": items});
        self.log(s, EventKind::OutputIngested, payload)?;

        let executed = ExecutedCall {
            call_id,
            tool: call.tool.clone(),
            arguments: call.arguments.clone(),
            recipients: recipients.to_vec(),
            result: result.clone(),
            actor: s.owner.clone(),
        };
        let verdict = s.obligations.on_call(self.policy.active_obligations(), &executed);
        let pending = s.obligations.clone();
        self.log(s, EventKind::ObligationUpdate, json!({"call_id": call_id, "verdict": verdict, "state": pending}))?;
        if let crate::obligation::MonitorVerdict::Violation(spec) = verdict {
            self.log(s, EventKind::Violation, json!({"call_id": call_id, "obligation": spec, "kind": "directness"}))?;
        }
        Ok(Outcome::Executed { call_id, result, items: ids })
    }

    /// Approve or deny a suspended call. Approval grants single-use
    /// declassification for the flagged items, scoped to this call, and runs it.
    pub fn resolve_confirmation(
        &self,
        pending_id: &str,
        decision: Resolution,
        authorizer: &Principal,
    ) -> Result<Outcome, GatewayError> {
        let session_id = self
            .queue
            .lock()
            .get(pending_id)
            .map(|p| p.session_id.clone())
            .ok_or_else(|| GatewayError::UnknownPending(pending_id.to_owned()))?;
        let session = self.session(&session_id)?;
        let mut s = session.lock();
        self.expire_locked(&mut s)?;
        let pending = {
            let mut q = self.queue.lock();
            let p = q.get_mut(pending_id).expect("pending entries are never removed");
            if p.resolution.is_some() {
                return Err(GatewayError::AlreadyResolved(pending_id.to_owned()));
            }
            if authorizer != &s.owner {
                return Err(GatewayError::NotOwner);
            }
            p.resolution = Some(decision);
            p.clone()
        };
        self.log(
            &mut s,
            EventKind::ConfirmationResolved,
            json!({"pending_id": pending_id, "call_id": pending.call_id, "decision": decision, "authorizer": authorizer}),
        )?;
        let result = self.finish_resolution(&mut s, &pending, decision);
        if let Ok(outcome) = &result {
            if let Some(p) = self.queue.lock().get_mut(pending_id) {
                p.outcome = Some(outcome.clone());
            }
        }
        result
    }

    fn finish_resolution(
        &self,
        s: &mut Session,
        pending: &PendingConfirmation,
        decision: Resolution,
    ) -> Result<Outcome, GatewayError> {
        match decision {
            Resolution::Deny => Ok(Outcome::Denied { pending_id: pending.pending_id.clone() }),
            Resolution::Approve => {
                let manifest = self
                    .manifests
                    .get(&pending.call.tool)
                    .ok_or_else(|| GatewayError::UnknownTool(pending.call.tool.clone()))?
                    .clone();
                let fingerprint = pending.call.fingerprint(&manifest);
                let owner = s.owner.clone();
                for row in &pending.summary.items {
                    s.context.declassify(&row.item, fingerprint.clone(), &owner)?;
                    self.log_grant(s, "granted", &row.item, &fingerprint)?;
                }
                for row in &pending.summary.items {
                    s.context.consume_grant(&row.item, &fingerprint);
                    self.log_grant(s, "consumed", &row.item, &fingerprint)?;
                }
                let recipients = manifest.recipients(&pending.call.arguments);
                self.execute(s, pending.call_id, &pending.call, &manifest, &recipients)
            }
        }
    }

    fn log_grant(
        &self,
        s: &mut Session,
        action: &str,
        item: &ItemId,
        fp: &CallFingerprint,
    ) -> Result<(), GatewayError> {
        self.log(
            s,
            EventKind::Declassify,
            json!({"action": action, "via": "approval", "item": item, "fingerprint": fp}),
        )?;
        Ok(())
    }

    /// Auto-deny this session's confirmations that outlived the timeout.
    fn expire_locked(&self, s: &mut Session) -> Result<(), GatewayError> {
        let now = self.now();
        let expired: Vec<(String, u64)> = {
            let mut q = self.queue.lock();
            q.values_mut()
                .filter(|p| p.session_id == s.id && p.resolution.is_none())
                .filter(|p| now - p.created_at >= self.config.confirmation_timeout)
                .map(|p| {
                    p.resolution = Some(Resolution::Deny);
                    p.outcome = Some(Outcome::Denied { pending_id: p.pending_id.clone() });
                    (p.pending_id.clone(), p.call_id)
                })
                .collect()
        };
        for (id, call_id) in expired {
            self.log(
                s,
                EventKind::ConfirmationResolved,
                json!({"pending_id": id, "call_id": call_id, "decision": Resolution::Deny, "reason": "timeout"}),
            )?;
        }
        Ok(())
    }

    /// Unresolved confirmations across all sessions, oldest first.
    pub fn pending(&self) -> Result<Vec<PendingConfirmation>, GatewayError> {
        for id in self.session_ids() {
            let session = self.session(&id)?;
            let mut s = session.lock();
            if !s.closed {
                self.expire_locked(&mut s)?;
            }
        }
        let q = self.queue.lock();
        let mut out: Vec<PendingConfirmation> = q.values().filter(|p| p.resolution.is_none()).cloned().collect();
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.pending_id.cmp(&b.pending_id)));
        Ok(out)
    }

    /// Resolution state of a confirmation, if it exists.
    pub fn pending_status(&self, pending_id: &str) -> Option<PendingConfirmation> {
        self.queue.lock().get(pending_id).cloned()
    }

    pub fn mask(&self, session_id: &str, ids: &BTreeSet<ItemId>) -> Result<(), GatewayError> {
        let session = self.session(session_id)?;
        let mut s = session.lock();
        if s.closed {
            return Err(GatewayError::SessionClosed);
        }
        s.context.mask(ids)?;
        self.log(&mut s, EventKind::Mask, json!({"ids": ids}))?;
        Ok(())
    }

    /// Owner-issued, single-use declassification of `item` for `call`.
    pub fn declassify(
        &self,
        session_id: &str,
        item: &ItemId,
        call: &ToolCall,
        authorizer: &Principal,
    ) -> Result<CallFingerprint, GatewayError> {
        let session = self.session(session_id)?;
        let mut s = session.lock();
        if s.closed {
            return Err(GatewayError::SessionClosed);
        }
        let manifest = self.manifests.get(&call.tool).ok_or_else(|| GatewayError::UnknownTool(call.tool.clone()))?;
        let fp = call.fingerprint(manifest);
        s.context.declassify(item, fp.clone(), authorizer)?;
        self.log(
            &mut s,
            EventKind::Declassify,
            json!({"action": "granted", "via": "owner", "item": item, "fingerprint": fp, "authorizer": authorizer}),
        )?;
        Ok(fp)
    }

    pub fn close_session(&self, session_id: &str) -> Result<CloseReport, GatewayError> {
        let session = self.session(session_id)?;
        let mut s = session.lock();
        if s.closed {
            return Err(GatewayError::SessionClosed);
        }
        self.expire_locked(&mut s)?;
        let auto_denied: Vec<(String, u64)> = {
            let mut q = self.queue.lock();
            q.values_mut()
                .filter(|p| p.session_id == s.id && p.resolution.is_none())
                .map(|p| {
                    p.resolution = Some(Resolution::Deny);
                    p.outcome = Some(Outcome::Denied { pending_id: p.pending_id.clone() });
                    (p.pending_id.clone(), p.call_id)
                })
                .collect()
        };
        for (id, call_id) in &auto_denied {
            self.log(
                &mut s,
                EventKind::ConfirmationResolved,
                json!({"pending_id": id, "call_id": call_id, "decision": Resolution::Deny, "reason": "session_closed"}),
            )?;
        }
        let violations: Vec<UnmetObligation> = s
            .obligations
            .unmet()
            .iter()
            .flat_map(|p| {
                p.outstanding.iter().map(|a| UnmetObligation {
                    obligation: p.spec_id.clone(),
                    trigger_call: p.trigger_call,
                    attendee: a.clone(),
                })
            })
            .collect();
        for v in &violations {
            self.log(&mut s, EventKind::Violation, json!({"violation": v, "kind": "unmet_at_close"}))?;
        }
        let report = CloseReport {
            session_id: s.id.clone(),
            auto_denied: auto_denied.into_iter().map(|(id, _)| id).collect(),
            violations,
        };
        self.log(&mut s, EventKind::SessionClosed, json!({"report": report}))?;
        s.closed = true;
        Ok(report)
    }

    pub fn is_closed(&self, session_id: &str) -> Result<bool, GatewayError> {
        Ok(self.session(session_id)?.lock().closed)
    }

    pub fn owner(&self, session_id: &str) -> Result<Principal, GatewayError> {
        Ok(self.session(session_id)?.lock().owner.clone())
    }

    pub fn trace(&self, session_id: &str) -> Result<Vec<TraceEvent>, GatewayError> {
        Ok(self.session(session_id)?.lock().log.events().to_vec())
    }

    /// Header plus events, exactly as written to disk.
    pub fn audit_log(&self, session_id: &str) -> Result<String, GatewayError> {
        Ok(self.session(session_id)?.lock().log.to_jsonl())
    }

    pub fn audit_path(&self, session_id: &str) -> Result<Option<PathBuf>, GatewayError> {
        Ok(self.session(session_id)?.lock().log.path().map(Path::to_path_buf))
    }

    pub fn context(&self, session_id: &str) -> Result<Vec<ItemView>, GatewayError> {
        let session = self.session(session_id)?;
        let s = session.lock();
        Ok(s.context.items().map(|i| ItemView { item: i.clone(), masked: s.context.is_masked(&i.id) }).collect())
    }

    pub fn obligations(&self, session_id: &str) -> Result<ObligationState, GatewayError> {
        Ok(self.session(session_id)?.lock().obligations.clone())
    }
}

fn source_name(item: &DataItem) -> String {
    match &item.source {
        crate::provenance::Source::ToolOutput { tool, field } => format!("{tool}.{field}"),
        crate::provenance::Source::UserInput => "user_input".into(),
        crate::provenance::Source::AgentLiteral => "agent_literal".into(),
    }
}

/// Decisions of a trace, without seq or timestamps, for comparisons.
pub fn decision_sequence(events: &[TraceEvent]) -> Vec<Decision> {
    events
        .iter()
        .filter(|e| e.kind == EventKind::Decision)
        .filter_map(|e| e.payload.get("decision").cloned())
        .filter_map(|d| serde_json::from_value(d).ok())
        .collect()
}
