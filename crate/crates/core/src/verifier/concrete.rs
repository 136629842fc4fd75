//! Driving the real gateway with an abstract trace.
//!
//! Each abstract step becomes a concrete call whose provenance cites items
//! carrying exactly the abstract labels, answered by a backend that returns
//! results with the chosen audiences. Every decision and every resulting
//! context label must match the abstract run; counterexamples are checked,
//! not trusted.

use std::collections::BTreeSet;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;
use serde_json::{json, Map, Value};

use super::{AbstractCall, Hazard, VerificationResult, VerifyConfig, VerifyError};
use crate::call::{Provenance, ToolCall};
use crate::gateway::{
    backend, decision_sequence, BackendError, CloseReport, Gateway, GatewayConfig, Outcome, Resolution, ToolBackend,
    TraceEvent,
};
use crate::harness::{find_leaks, Leak};
use crate::label::{Confidentiality, LabelSet};
use crate::manifest::{ManifestSet, ToolManifest};
use crate::policy::{PolicySet, Verdict};

/// Returns whatever result was staged for the next call.
#[derive(Default)]
struct Staged {
    next: Mutex<Option<Value>>,
}

impl ToolBackend for Staged {
    fn invoke(&self, tool: &str, _: &Map<String, Value>) -> Result<Value, BackendError> {
        self.next.lock().take().ok_or_else(|| BackendError(format!("no result staged for `{tool}`")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConcreteRun {
    pub session_id: String,
    pub outcomes: Vec<Outcome>,
    pub trace: Vec<TraceEvent>,
    pub close: CloseReport,
    pub leaks: Vec<Leak>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayConfirmation {
    pub hazard: Hazard,
    pub steps: usize,
    pub run: ConcreteRun,
}

fn mismatch(step: usize, reason: impl Into<String>) -> VerifyError {
    VerifyError::ReplayMismatch { step, reason: reason.into() }
}

fn result_value(manifest: &ToolManifest, call: &AbstractCall) -> Value {
    let mut out = Map::new();
    for choice in &call.outputs {
        let refs = manifest.output(&choice.field).map(|o| o.audience_refs()).unwrap_or_default();
        let v = match (refs.is_empty(), choice.label.confidentiality()) {
            (false, Confidentiality::Audience(set)) => {
                let who: Vec<&str> = set.iter().map(|p| p.as_str()).collect();
                Value::Object(refs.iter().map(|r| ((*r).to_owned(), json!(who))).collect())
            }
            _ => json!("ok"),
        };
        out.insert(choice.field.clone(), v);
    }
    Value::Object(out)
}

fn strip_pending(mut d: crate::policy::Decision) -> crate::policy::Decision {
    if let Verdict::Confirm { pending_id, .. } = &mut d.verdict {
        pending_id.clear();
    }
    d
}

/// Run `steps` through a fresh gateway session, checking every decision and
/// every context label against the abstract semantics.
pub fn realize(
    manifests: &ManifestSet,
    policy: &PolicySet,
    steps: &[AbstractCall],
    config: &VerifyConfig,
) -> Result<ConcreteRun, VerifyError> {
    let staged = Arc::new(Staged::default());
    let gw_config = GatewayConfig { internal_domains: config.internal_domains.clone(), ..GatewayConfig::default() };
    let gw = Gateway::new(manifests.clone(), policy.clone(), gw_config, backend::shared(staged.clone()));
    let owner = super::universe(config.universe.max(1))[0].clone();
    let sid = gw.open_session(owner.clone()).map_err(|e| mismatch(0, e.to_string()))?;
    let mut expected: BTreeSet<LabelSet> = BTreeSet::new();
    let mut outcomes = Vec::new();

    for (n, step) in steps.iter().enumerate() {
        let manifest = manifests.get(&step.tool).ok_or_else(|| mismatch(n, format!("unknown tool `{}`", step.tool)))?;
        let items = gw.context(&sid).map_err(|e| mismatch(n, e.to_string()))?;
        let mut cited = BTreeSet::new();
        for label in &step.cites {
            let item = items
                .iter()
                .find(|i| !i.masked && &i.item.label == label)
                .ok_or_else(|| mismatch(n, format!("no context item labeled {}", label.to_json())))?;
            cited.insert(item.item.id.clone());
        }
        let call =
            ToolCall { tool: step.tool.clone(), arguments: step.arguments.clone(), provenance: Provenance::All(cited) };
        *staged.next.lock() = Some(result_value(manifest, step));

        let mut outcome = gw.intercept(&sid, call).map_err(|e| mismatch(n, e.to_string()))?;
        let trace = gw.trace(&sid).map_err(|e| mismatch(n, e.to_string()))?;
        let concrete = decision_sequence(&trace).pop().ok_or_else(|| mismatch(n, "no decision recorded"))?;
        if strip_pending(concrete.clone()) != strip_pending(step.decision.clone()) {
            return Err(mismatch(n, format!("decision {concrete:?}, abstract {:?}", step.decision)));
        }
        if let Outcome::Pending { pending_id } = &outcome {
            if !step.approved {
                return Err(mismatch(n, "confirmation without an approve branch"));
            }
            outcome = gw
                .resolve_confirmation(pending_id, Resolution::Approve, &owner)
                .map_err(|e| mismatch(n, e.to_string()))?;
        }
        if !matches!(outcome, Outcome::Executed { .. }) {
            return Err(mismatch(n, format!("call not executed: {outcome:?}")));
        }
        *staged.next.lock() = None;
        outcomes.push(outcome);

        let parents = if step.arguments.is_empty() { LabelSet::bottom() } else { step.arg_label.clone() };
        let trust = LabelSet::bottom().with_trust(manifest.trust);
        expected.extend(step.outputs.iter().map(|o| o.label.join(&trust).join(&parents)));
        let actual: BTreeSet<LabelSet> =
            gw.context(&sid).map_err(|e| mismatch(n, e.to_string()))?.into_iter().map(|i| i.item.label).collect();
        if actual != expected {
            return Err(mismatch(n, "context labels differ from the abstract state"));
        }
    }

    let close = gw.close_session(&sid).map_err(|e| mismatch(steps.len(), e.to_string()))?;
    let trace = gw.trace(&sid).map_err(|e| mismatch(steps.len(), e.to_string()))?;
    let leaks = find_leaks(manifests, &trace);
    Ok(ConcreteRun { session_id: sid, outcomes, trace, close, leaks })
}

/// Realize an unsafe result's counterexample and confirm the hazard occurs.
pub fn replay_counterexample(
    result: &VerificationResult,
    manifests: &ManifestSet,
    policy: &PolicySet,
    config: &VerifyConfig,
) -> Result<ReplayConfirmation, VerifyError> {
    let cex = result.counterexample().ok_or(VerifyError::NotUnsafe)?;
    let run = realize(manifests, policy, &cex.steps, config)?;
    let last = cex.steps.len();
    let hit = match cex.hazard {
        Hazard::PrivateLeak => {
            let call_id = last as u64;
            run.leaks.iter().any(|l| l.call_id == call_id)
        }
        Hazard::UntrustedWrite => cex.steps.last().is_some_and(|s| {
            manifests.get(&s.tool).is_some_and(|m| Hazard::UntrustedWrite.on_call(m, &s.recipients, &s.arg_label))
        }),
        Hazard::ObligationUnmetAtEnd => !run.close.violations.is_empty(),
    };
    if !hit {
        return Err(mismatch(last, format!("{} did not occur concretely", cex.hazard)));
    }
    Ok(ReplayConfirmation { hazard: cex.hazard, steps: last, run })
}
