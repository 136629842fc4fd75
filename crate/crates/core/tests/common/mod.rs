//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use labelgate::call::ExecutedCall;
use labelgate::gateway::{Gateway, GatewayConfig, TraceEvent};
use labelgate::harness::{
    calendar_manifests, policy_variant, scenario, MockFleet, Step, COLLEAGUE, INTERNAL_DOMAIN, OWNER, PARTNER,
};
use labelgate::label::{Confidentiality, LabelSet, Principal};
use labelgate::policy::Decision;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Map, Value};

pub const CAST: [&str; 3] = [OWNER, COLLEAGUE, PARTNER];
pub const TITLES: [&str; 3] = ["STD treatment appointment", "Project sync", "Partner review"];

pub fn gateway(policy: &str) -> (Arc<Gateway>, MockFleet) {
    let fleet = MockFleet::default();
    let config = GatewayConfig { internal_domains: vec![INTERNAL_DOMAIN.into()], ..GatewayConfig::default() };
    let gw = Gateway::new(calendar_manifests(), policy_variant(policy).unwrap(), config, fleet.factory());
    (Arc::new(gw), fleet)
}

pub fn owner() -> Principal {
    Principal::from(OWNER)
}

/// Decisions with the session-specific pending id blanked out.
pub fn normalized(decisions: Vec<Decision>) -> Vec<Value> {
    decisions
        .into_iter()
        .map(|d| {
            let mut v = serde_json::to_value(d).unwrap();
            strip_key(&mut v, "pending_id");
            v
        })
        .collect()
}

fn strip_key(v: &mut Value, key: &str) {
    match v {
        Value::Object(m) => {
            m.remove(key);
            m.values_mut().for_each(|x| strip_key(x, key));
        }
        Value::Array(a) => a.iter_mut().for_each(|x| strip_key(x, key)),
        _ => {}
    }
}

pub fn events_of<'a>(trace: &'a [TraceEvent], kind: &str) -> Vec<&'a TraceEvent> {
    trace.iter().filter(|e| serde_json::to_value(e.kind).unwrap() == kind).collect()
}

// ---- lattice ---------------------------------------------------------------

/// Restrictiveness order written from the definitions: a narrower audience,
/// lower trust and higher tags are all more restrictive.
pub fn oracle_leq(a: &LabelSet, b: &LabelSet) -> bool {
    let conf = match (a.confidentiality(), b.confidentiality()) {
        (_, Confidentiality::Everyone) => a.confidentiality().is_public(),
        (Confidentiality::Everyone, Confidentiality::Audience(_)) => true,
        (Confidentiality::Audience(x), Confidentiality::Audience(y)) => y.is_subset(x),
    };
    let keys: BTreeSet<&str> = a.tags().map(|(k, _)| k).chain(b.tags().map(|(k, _)| k)).collect();
    conf && b.trust() <= a.trust() && keys.iter().all(|k| a.tag(k) <= b.tag(k))
}

// ---- obligation monitor ----------------------------------------------------

pub fn executed(call_id: u64, tool: &str, recipients: &[&str], attendees: &[&str]) -> ExecutedCall {
    let recipients: Vec<Principal> = recipients.iter().map(|r| Principal::from(*r)).collect();
    let mut arguments = Map::new();
    let result = match tool {
        "update_event" => {
            arguments.insert("event_id".into(), json!("e1"));
            json!({"event": {"event_id": "e1", "attendees": attendees}})
        }
        "send_email" => {
            arguments.insert("to".into(), json!(recipients[0].as_str()));
            json!({"status": "sent"})
        }
        _ => json!({"events": []}),
    };
    ExecutedCall { call_id, tool: tool.into(), arguments, recipients, result, actor: owner() }
}

/// One update without a later notification, as the whole-trace checker sees it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct OpenUpdate {
    pub trigger_call: u64,
    pub outstanding: BTreeSet<Principal>,
}

/// Whole-trace reading of "after an update, email every other attendee, and
/// do nothing else until done". Recomputes everything from scratch for each
/// prefix.
pub struct Spec2Oracle<'a> {
    pub trace: &'a [ExecutedCall],
}

impl Spec2Oracle<'_> {
    fn outstanding_before(&self, trigger: usize, at: usize) -> BTreeSet<Principal> {
        let t = &self.trace[trigger];
        let mut left: BTreeSet<Principal> = t.result["event"]["attendees"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(Value::as_str)
            .map(Principal::from)
            .filter(|p| *p != t.actor)
            .collect();
        for c in &self.trace[trigger + 1..at] {
            if c.tool == "send_email" {
                for r in &c.recipients {
                    left.remove(r);
                }
            }
        }
        left
    }

    fn open_at(&self, at: usize) -> Vec<(usize, BTreeSet<Principal>)> {
        (0..at)
            .filter(|&i| self.trace[i].tool == "update_event")
            .map(|i| (i, self.outstanding_before(i, at)))
            .filter(|(_, left)| !left.is_empty())
            .collect()
    }

    /// Is the call at `k` a directness violation?
    pub fn violation_at(&self, k: usize) -> bool {
        let open = self.open_at(k);
        let c = &self.trace[k];
        let helps =
            c.tool == "send_email" && open.iter().any(|(_, left)| c.recipients.iter().any(|r| left.contains(r)));
        !open.is_empty() && !helps
    }

    pub fn open_at_end(&self) -> Vec<OpenUpdate> {
        let mut v: Vec<OpenUpdate> = self
            .open_at(self.trace.len())
            .into_iter()
            .map(|(i, outstanding)| OpenUpdate { trigger_call: self.trace[i].call_id, outstanding })
            .collect();
        v.sort();
        v
    }
}

pub fn random_trace(rng: &mut StdRng) -> Vec<ExecutedCall> {
    let len = rng.gen_range(0..=12);
    (0..len)
        .map(|i| {
            let id = i as u64 + 1;
            match rng.gen_range(0..3) {
                0 => executed(id, "list_events", &[], &[]),
                1 => {
                    let attendees: Vec<&str> = CAST.iter().copied().filter(|_| rng.gen_bool(0.6)).collect();
                    executed(id, "update_event", &[], &attendees)
                }
                _ => {
                    let n = rng.gen_range(1..=2);
                    let to: Vec<&str> = CAST.choose_multiple(rng, n).copied().collect();
                    executed(id, "send_email", &to, &[])
                }
            }
        })
        .collect()
}

// ---- scripted sessions -----------------------------------------------------

/// A random plan over the mock calendar: reads, reschedules, emails with or
/// without citations, and masks.
pub fn random_steps(rng: &mut StdRng) -> Vec<Step> {
    let mut steps = vec![Step::call("list_events", json!({}))];
    for _ in 0..rng.gen_range(1..=8) {
        let step = match rng.gen_range(0..10) {
            0 => Step::call("list_events", json!({})),
            1 | 2 => {
                let (id, title) = *[("e1", TITLES[0]), ("e2", TITLES[1]), ("e3", TITLES[2])].choose(rng).unwrap();
                let args = json!({"event_id": id, "time": format!("2026-03-0{}T10:00", rng.gen_range(1..=9))});
                if rng.gen_bool(0.5) {
                    Step::cited("update_event", args, &[title])
                } else {
                    Step::call("update_event", args)
                }
            }
            3 => Step::mask(&[TITLES.choose(rng).unwrap()]),
            _ => {
                let to = *CAST[1..].choose(rng).unwrap();
                let title = *TITLES.choose(rng).unwrap();
                let args = json!({"to": to, "subject": "update", "body": format!("about {title}")});
                if rng.gen_bool(0.6) {
                    Step::cited("send_email", args, &[title])
                } else {
                    Step::call("send_email", args)
                }
            }
        };
        steps.push(step);
    }
    steps
}

pub fn shipped_steps(name: &str) -> Vec<Step> {
    scenario(name).unwrap().steps
}
