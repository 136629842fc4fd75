//! Mustlist monitor: trigger -> required-call obligations over the call trace.
//!
//! A trigger call (e.g. `update_event`) instantiates a set of required calls
//! (e.g. one `send_email` per other attendee). For a *direct* obligation,
//! every executed call between the trigger and the moment its set empties
//! must discharge an outstanding requirement of some pending obligation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::call::ExecutedCall;
use crate::label::Principal;
use crate::manifest::principals_in;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trigger {
    pub tool: String,
    /// Name of the argument or result member the obligation is about.
    pub bind: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Required {
    pub tool: String,
    /// Dotted path rooted at the trigger's bound name, e.g. `event.attendees`.
    pub for_each: String,
    #[serde(default)]
    pub exclude_actor: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObligationSpec {
    pub id: String,
    pub trigger: Trigger,
    pub required: Required,
    #[serde(default = "default_direct")]
    pub direct: bool,
}

fn default_direct() -> bool {
    true
}

impl ObligationSpec {
    /// The path's first segment must be the trigger's binder.
    pub fn is_well_formed(&self) -> bool {
        self.required.for_each.split('.').next() == Some(self.trigger.bind.as_str())
    }

    /// Principals the trigger call obliges the agent to contact.
    fn required_set(&self, arguments: &Map<String, Value>, result: &Value, actor: &Principal) -> BTreeSet<Principal> {
        let mut segments = self.required.for_each.split('.');
        let root = segments.next().unwrap_or_default();
        let mut cur = arguments.get(root).or_else(|| result.get(root));
        for seg in segments {
            cur = cur.and_then(|v| v.get(seg));
        }
        principals_in(cur).into_iter().filter(|p| !(self.required.exclude_actor && p == actor)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PendingObligation {
    pub spec_id: String,
    pub trigger_call: u64,
    pub outstanding: BTreeSet<Principal>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "spec", rename_all = "snake_case")]
pub enum MonitorVerdict {
    Ok,
    Violation(String),
}

impl MonitorVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, MonitorVerdict::Ok)
    }
}

/// The tool name and recipients of a call; all the monitor needs to decide
/// whether the call discharges anything.
#[derive(Debug, Clone, Copy)]
pub struct CallShape<'a> {
    pub tool: &'a str,
    pub recipients: &'a [Principal],
}

impl<'a> From<&'a ExecutedCall> for CallShape<'a> {
    fn from(c: &'a ExecutedCall) -> Self {
        CallShape { tool: &c.tool, recipients: &c.recipients }
    }
}

/// Pending obligations of one session, in trigger order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObligationState {
    pub pending: Vec<PendingObligation>,
}

fn spec<'s>(specs: &'s [ObligationSpec], id: &str) -> Option<&'s ObligationSpec> {
    specs.iter().find(|s| s.id == id)
}

impl ObligationState {
    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Does `call` discharge an outstanding requirement of any pending obligation?
    pub fn discharges(&self, specs: &[ObligationSpec], call: CallShape<'_>) -> bool {
        self.pending.iter().any(|p| {
            spec(specs, &p.spec_id).is_some_and(|s| s.required.tool == call.tool)
                && call.recipients.iter().any(|r| p.outstanding.contains(r))
        })
    }

    /// Spec id of the directness obligation `call` would break, if any.
    pub fn directness_violation(&self, specs: &[ObligationSpec], call: CallShape<'_>) -> Option<String> {
        if self.discharges(specs, call) {
            return None;
        }
        self.pending.iter().find(|p| spec(specs, &p.spec_id).is_some_and(|s| s.direct)).map(|p| p.spec_id.clone())
    }

    /// Would executing `call` now yield a violation?
    pub fn pending_blocks(&self, specs: &[ObligationSpec], call: CallShape<'_>) -> bool {
        self.directness_violation(specs, call).is_some()
    }

    /// Advance the monitor over one executed call.
    pub fn on_call(&mut self, specs: &[ObligationSpec], call: &ExecutedCall) -> MonitorVerdict {
        let shape = CallShape::from(call);
        let verdict = match self.directness_violation(specs, shape) {
            Some(id) => MonitorVerdict::Violation(id),
            None => MonitorVerdict::Ok,
        };
        for p in &mut self.pending {
            if spec(specs, &p.spec_id).is_some_and(|s| s.required.tool == call.tool) {
                for r in &call.recipients {
                    p.outstanding.remove(r);
                }
            }
        }
        self.pending.retain(|p| !p.outstanding.is_empty());
        for s in specs.iter().filter(|s| s.trigger.tool == call.tool) {
            let outstanding = s.required_set(&call.arguments, &call.result, &call.actor);
            if !outstanding.is_empty() {
                self.pending.push(PendingObligation { spec_id: s.id.clone(), trigger_call: call.call_id, outstanding });
            }
        }
        verdict
    }

    /// Obligations still open; at session close each one is a violation.
    pub fn unmet(&self) -> &[PendingObligation] {
        &self.pending
    }

    /// Same state with trigger ids renumbered 0.. in order, for memoization.
    pub fn canonical(&self) -> ObligationState {
        ObligationState {
            pending: self
                .pending
                .iter()
                .enumerate()
                .map(|(i, p)| PendingObligation { trigger_call: i as u64, ..p.clone() })
                .collect(),
        }
    }
}

/// Functional form of [`ObligationState::on_call`].
pub fn on_call(
    state: &ObligationState,
    specs: &[ObligationSpec],
    call: &ExecutedCall,
) -> (ObligationState, MonitorVerdict) {
    let mut next = state.clone();
    let v = next.on_call(specs, call);
    (next, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    const USER: &str = "user@corp.example";

    fn notify(direct: bool) -> ObligationSpec {
        ObligationSpec {
            id: "notify-attendees".into(),
            trigger: Trigger { tool: "update_event".into(), bind: "event".into() },
            required: Required { tool: "send_email".into(), for_each: "event.attendees".into(), exclude_actor: true },
            direct,
        }
    }

    fn update(id: u64, attendees: &[&str]) -> ExecutedCall {
        ExecutedCall {
            call_id: id,
            tool: "update_event".into(),
            arguments: json!({"event_id": "e1"}).as_object().unwrap().clone(),
            recipients: vec![],
            result: json!({"event": {"attendees": attendees}}),
            actor: USER.into(),
        }
    }

    fn email(id: u64, to: &str) -> ExecutedCall {
        ExecutedCall {
            call_id: id,
            tool: "send_email".into(),
            arguments: json!({"to": to}).as_object().unwrap().clone(),
            recipients: vec![to.into()],
            result: json!({"status": "sent"}),
            actor: USER.into(),
        }
    }

    fn plain(id: u64, tool: &str) -> ExecutedCall {
        ExecutedCall {
            call_id: id,
            tool: tool.into(),
            arguments: Map::new(),
            recipients: vec![],
            result: Value::Null,
            actor: USER.into(),
        }
    }

    #[test]
    fn update_then_notify_everyone() {
        let specs = [notify(true)];
        let mut s = ObligationState::default();
        assert!(s.on_call(&specs, &update(1, &["a@x", "b@x", USER])).is_ok());
        let expected: BTreeSet<Principal> = ["a@x", "b@x"].into_iter().map(Principal::from).collect();
        assert_eq!(s.pending[0].outstanding, expected);
        assert!(s.on_call(&specs, &email(2, "A@X")).is_ok());
        assert_eq!(s.pending[0].outstanding.len(), 1);
        assert!(s.on_call(&specs, &email(3, "b@x")).is_ok());
        assert!(s.is_empty());
    }

    #[test]
    fn unrelated_call_breaks_directness() {
        let specs = [notify(true)];
        let mut s = ObligationState::default();
        s.on_call(&specs, &update(1, &["a@x"]));
        assert_eq!(s.on_call(&specs, &plain(2, "list_events")), MonitorVerdict::Violation("notify-attendees".into()));
    }

    #[test]
    fn relaxed_spec_allows_interleaving() {
        let specs = [notify(false)];
        let mut s = ObligationState::default();
        s.on_call(&specs, &update(1, &["a@x"]));
        assert!(s.on_call(&specs, &plain(2, "list_events")).is_ok());
        assert_eq!(s.unmet().len(), 1);
        assert!(s.on_call(&specs, &email(3, "a@x")).is_ok());
        assert!(s.unmet().is_empty());
    }

    #[test]
    fn owner_only_event_creates_nothing() {
        let specs = [notify(true)];
        let mut s = ObligationState::default();
        assert!(s.on_call(&specs, &update(1, &[USER])).is_ok());
        assert!(s.is_empty());
    }

    #[test]
    fn duplicate_discharge_counts_once() {
        let specs = [notify(true)];
        let mut s = ObligationState::default();
        s.on_call(&specs, &update(1, &["a@x", "b@x"]));
        assert!(s.on_call(&specs, &email(2, "a@x")).is_ok());
        assert!(s.pending_blocks(&specs, CallShape { tool: "send_email", recipients: &["a@x".into()] }));
        assert!(!s.on_call(&specs, &email(3, "a@x")).is_ok());
        assert_eq!(s.pending[0].outstanding.len(), 1);
    }

    #[test]
    fn pending_blocks_cases() {
        let specs = [notify(true)];
        let empty = ObligationState::default();
        assert!(!empty.pending_blocks(&specs, CallShape { tool: "update_event", recipients: &[] }));
        let (s, _) = on_call(&empty, &specs, &update(1, &["a@x"]));
        assert!(!s.pending_blocks(&specs, CallShape { tool: "send_email", recipients: &["a@x".into()] }));
        assert!(s.pending_blocks(&specs, CallShape { tool: "update_event", recipients: &[] }));
        assert!(s.pending_blocks(&specs, CallShape { tool: "send_email", recipients: &["z@x".into()] }));
    }

    #[test]
    fn second_update_stacks() {
        let specs = [notify(false)];
        let mut s = ObligationState::default();
        s.on_call(&specs, &update(1, &["a@x"]));
        s.on_call(&specs, &update(2, &["a@x", "b@x"]));
        assert_eq!(s.pending.len(), 2);
        s.on_call(&specs, &email(3, "a@x"));
        assert_eq!(s.pending.len(), 1);
        assert_eq!(s.pending[0].trigger_call, 2);
        assert_eq!(s.canonical().pending[0].trigger_call, 0);
    }

    #[test]
    fn bind_reads_arguments_before_result() {
        let spec = ObligationSpec {
            id: "x".into(),
            trigger: Trigger { tool: "share".into(), bind: "with".into() },
            required: Required { tool: "send_email".into(), for_each: "with".into(), exclude_actor: false },
            direct: true,
        };
        assert!(spec.is_well_formed());
        let call = ExecutedCall {
            call_id: 1,
            tool: "share".into(),
            arguments: json!({"with": ["q@x", USER]}).as_object().unwrap().clone(),
            recipients: vec![],
            result: Value::Null,
            actor: USER.into(),
        };
        let mut s = ObligationState::default();
        s.on_call(&[spec], &call);
        assert_eq!(s.pending[0].outstanding.len(), 2);
    }
}
