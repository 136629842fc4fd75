//! Offline replay of an audit log.
//!
//! Rebuilds the taint store and obligation state from the recorded events,
//! re-runs the policy engine on every proposed call, and checks that each
//! recomputed decision equals the recorded one.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use super::audit::{EventKind, LogHeader, TraceEvent, LOG_FORMAT};
use crate::call::{CallFingerprint, ExecutedCall, ItemId, Provenance, ToolCall};
use crate::label::Principal;
use crate::manifest::{parse_manifest_value, ManifestSet};
use crate::obligation::ObligationState;
use crate::policy::{evaluate, parse_policy_value, Decision, EvalInput, EvalSettings, Verdict};
use crate::provenance::{ContextStore, DataItem};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("log is not valid: {0}")]
    Malformed(String),
    #[error("corrupt log at seq {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },
    #[error("decision mismatch at seq {seq}: recorded {recorded}, replayed {replayed}")]
    DecisionMismatch { seq: u64, recorded: String, replayed: String },
    #[error("state mismatch at seq {seq}: {what}")]
    StateMismatch { seq: u64, what: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayedDecision {
    pub seq: u64,
    pub call_id: u64,
    pub decision: Decision,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayReport {
    pub session_id: String,
    pub events: usize,
    pub decisions: Vec<ReplayedDecision>,
    pub items: Vec<DataItem>,
    pub obligations: ObligationState,
}

struct Proposed {
    call: ToolCall,
    recipients: Vec<Principal>,
    authorized: bool,
    ingested: Option<Vec<DataItem>>,
}

fn corrupt(seq: u64, reason: impl Into<String>) -> ReplayError {
    ReplayError::CorruptLog { seq, reason: reason.into() }
}

fn field<'a>(e: &'a TraceEvent, key: &str) -> Result<&'a Value, ReplayError> {
    e.payload.get(key).ok_or_else(|| corrupt(e.seq, format!("missing `{key}`")))
}

fn parse<T: serde::de::DeserializeOwned>(e: &TraceEvent, key: &str) -> Result<T, ReplayError> {
    serde_json::from_value(field(e, key)?.clone()).map_err(|err| corrupt(e.seq, format!("bad `{key}`: {err}")))
}

/// Replay a complete JSONL log (header line first).
pub fn replay(log: &str) -> Result<ReplayReport, ReplayError> {
    let mut lines = log.lines().filter(|l| !l.trim().is_empty());
    let header: LogHeader =
        serde_json::from_str(lines.next().ok_or_else(|| ReplayError::Malformed("empty log".into()))?)
            .map_err(|e| ReplayError::Malformed(format!("header: {e}")))?;
    if header.format != LOG_FORMAT {
        return Err(ReplayError::Malformed(format!("unsupported format `{}`", header.format)));
    }
    let tools = parse_manifest_value(&header.manifests).map_err(|e| ReplayError::Malformed(e.to_string()))?;
    let manifests = ManifestSet::new(tools).map_err(|e| ReplayError::Malformed(e.to_string()))?;
    let policy = parse_policy_value(&header.policy).map_err(|e| ReplayError::Malformed(e.to_string()))?;
    let settings = EvalSettings::with_internal_domains(&header.internal_domains);
    let owner = Principal::new(header.owner.clone()).map_err(|e| ReplayError::Malformed(e.to_string()))?;

    let mut context = ContextStore::new(owner.clone());
    let mut obligations = ObligationState::default();
    let mut calls: BTreeMap<u64, Proposed> = BTreeMap::new();
    let mut last_decision: Option<(u64, Decision)> = None;
    let mut pending_calls: BTreeMap<String, u64> = BTreeMap::new();
    let mut confirms = 0u64;
    let mut decisions = Vec::new();
    let mut count = 0usize;

    for (expected, line) in lines.enumerate() {
        let e: TraceEvent =
            serde_json::from_str(line).map_err(|err| ReplayError::Malformed(format!("event: {err}")))?;
        if e.seq != expected as u64 {
            return Err(corrupt(e.seq, format!("expected seq {expected}")));
        }
        count += 1;
        match e.kind {
            EventKind::CallProposed => {
                let call_id: u64 = parse(&e, "call_id")?;
                let tool: String = parse(&e, "tool")?;
                let arguments: Map<String, Value> = parse(&e, "arguments")?;
                let provenance: Provenance = parse(&e, "provenance")?;
                let manifest = manifests.get(&tool).ok_or_else(|| corrupt(e.seq, format!("unknown tool `{tool}`")))?;
                let call = ToolCall { tool, arguments, provenance };
                let recipients = manifest.recipients(&call.arguments);
                let fp = call.fingerprint(manifest);
                let labels = context.argument_labels(&call, &fp).map_err(|err| corrupt(e.seq, err.to_string()))?;
                let candidate = format!("{}-p{}", header.session_id, confirms + 1);
                let decision = evaluate(
                    EvalInput {
                        manifest,
                        recipients: &recipients,
                        arg_labels: &labels.effective,
                        obligations: &obligations,
                    },
                    &policy,
                    &settings,
                    &candidate,
                );
                if matches!(decision.verdict, Verdict::Confirm { .. }) {
                    confirms += 1;
                }
                let authorized = decision.is_allow();
                last_decision = Some((call_id, decision));
                calls.insert(call_id, Proposed { call, recipients, authorized, ingested: None });
            }
            EventKind::Decision => {
                let call_id: u64 = parse(&e, "call_id")?;
                let recorded: Decision = parse(&e, "decision")?;
                let (replayed_id, replayed) =
                    last_decision.take().ok_or_else(|| corrupt(e.seq, "decision without a proposed call"))?;
                if replayed_id != call_id {
                    return Err(corrupt(e.seq, "decision for a different call"));
                }
                if replayed != recorded {
                    return Err(ReplayError::DecisionMismatch {
                        seq: e.seq,
                        recorded: serde_json::to_string(&recorded).unwrap_or_default(),
                        replayed: serde_json::to_string(&replayed).unwrap_or_default(),
                    });
                }
                decisions.push(ReplayedDecision { seq: e.seq, call_id, decision: replayed });
            }
            EventKind::ConfirmationRequested => {
                pending_calls.insert(parse(&e, "pending_id")?, parse(&e, "call_id")?);
            }
            EventKind::ConfirmationResolved => {
                let id: String = parse(&e, "pending_id")?;
                let call_id =
                    *pending_calls.get(&id).ok_or_else(|| corrupt(e.seq, format!("unknown pending `{id}`")))?;
                if field(&e, "decision")?.as_str() == Some("approve") {
                    let p = calls.get_mut(&call_id).ok_or_else(|| corrupt(e.seq, "approval for unknown call"))?;
                    p.authorized = true;
                }
            }
            EventKind::Declassify => {
                let action: String = parse(&e, "action")?;
                let via: String = parse(&e, "via")?;
                let item: ItemId = parse(&e, "item")?;
                let fp: CallFingerprint = parse(&e, "fingerprint")?;
                match (action.as_str(), via.as_str()) {
                    ("granted", _) => {
                        context.declassify(&item, fp, &owner).map_err(|err| corrupt(e.seq, err.to_string()))?
                    }
                    ("consumed", "approval") => {
                        if !context.consume_grant(&item, &fp) {
                            return Err(corrupt(e.seq, "consumed a grant that does not exist"));
                        }
                    }
                    // already consumed while recomputing the argument labels
                    ("consumed", _) => {}
                    _ => return Err(corrupt(e.seq, format!("unknown declassify action `{action}`"))),
                }
            }
            EventKind::Mask => {
                let ids: BTreeSet<ItemId> = parse(&e, "ids")?;
                context.mask(&ids).map_err(|err| corrupt(e.seq, err.to_string()))?;
            }
            EventKind::CallExecuted => {
                let call_id: u64 = parse(&e, "call_id")?;
                let p = calls.get_mut(&call_id).ok_or_else(|| corrupt(e.seq, "execution of an unproposed call"))?;
                if !p.authorized {
                    return Err(corrupt(e.seq, "execution without an allow decision or approval"));
                }
                p.authorized = false;
                if e.payload.get("error").is_some() {
                    continue;
                }
                let result = field(&e, "result")?.clone();
                let manifest = manifests.get(&p.call.tool).expect("checked when proposed");
                let ids =
                    context.ingest_output(&p.call, &result, manifest).map_err(|err| corrupt(e.seq, err.to_string()))?;
                p.ingested = Some(ids.iter().filter_map(|id| context.get(id)).cloned().collect());
                let executed = ExecutedCall {
                    call_id,
                    tool: p.call.tool.clone(),
                    arguments: p.call.arguments.clone(),
                    recipients: p.recipients.clone(),
                    result,
                    actor: owner.clone(),
                };
                obligations.on_call(policy.active_obligations(), &executed);
            }
            EventKind::OutputIngested => {
                let call_id: u64 = parse(&e, "call_id")?;
                let recorded: Vec<DataItem> = parse(&e, "items")?;
                let replayed = calls.get_mut(&call_id).and_then(|p| p.ingested.take());
                if replayed.as_ref() != Some(&recorded) {
                    return Err(ReplayError::StateMismatch { seq: e.seq, what: format!("items of call {call_id}") });
                }
            }
            EventKind::ObligationUpdate => {
                let recorded: ObligationState = parse(&e, "state")?;
                if recorded != obligations {
                    return Err(ReplayError::StateMismatch { seq: e.seq, what: "obligation state".into() });
                }
            }
            EventKind::Violation | EventKind::SessionClosed => {}
        }
    }
    Ok(ReplayReport {
        session_id: header.session_id,
        events: count,
        decisions,
        items: context.items().cloned().collect(),
        obligations,
    })
}
