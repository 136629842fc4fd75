//! Bounded model checker over a manifest set and a policy.
//!
//! Payloads are erased. A state is the set of labels present in the agent's
//! context plus the obligation monitor's state. From each state the agent
//! may call any tool, name any recipient from a small principal universe,
//! and derive all arguments from any subset of the context (so masking is
//! subsumed). Tool outputs with `$member` audiences may carry any audience
//! drawn from the universe that includes the owner. Decisions come from the
//! real policy engine; a confirmation branches into approve and deny.
//!
//! Breadth-first search with state memoization gives exact state counts for
//! safe results and shortest counterexamples for unsafe ones.

mod concrete;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

pub use concrete::{realize, replay_counterexample, ConcreteRun, ReplayConfirmation};

use crate::call::ExecutedCall;
use crate::label::{Capability, LabelSet, Principal, TrustLevel};
use crate::manifest::{ManifestSet, OutputSpec, ParamKind, ToolManifest};
use crate::obligation::ObligationState;
use crate::policy::{evaluate, Decision, EvalInput, EvalSettings, PolicySet, Verdict};

pub const DEFAULT_BOUND: usize = 6;
pub const DEFAULT_UNIVERSE: usize = 3;
pub const DEFAULT_STATE_CAP: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("state space exceeds the cap of {cap} states")]
    UniverseTooLarge { cap: usize },
    #[error("principal universe must contain at least the owner")]
    EmptyUniverse,
    #[error("unknown hazard `{0}`")]
    UnknownHazard(String),
    #[error("only an unsafe result has a counterexample to replay")]
    NotUnsafe,
    #[error("concrete replay diverged at step {step}: {reason}")]
    ReplayMismatch { step: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hazard {
    /// A label that does not flow to the call's recipient (or, with no
    /// recipient, any non-public label) reaches an external write.
    PrivateLeak,
    /// Untrusted data reaches an external write.
    UntrustedWrite,
    /// The agent can stop while an obligation is still open.
    ObligationUnmetAtEnd,
}

impl Hazard {
    pub const ALL: [Hazard; 3] = [Hazard::PrivateLeak, Hazard::UntrustedWrite, Hazard::ObligationUnmetAtEnd];

    pub fn as_str(self) -> &'static str {
        match self {
            Hazard::PrivateLeak => "private_leak",
            Hazard::UntrustedWrite => "untrusted_write",
            Hazard::ObligationUnmetAtEnd => "obligation_unmet_at_end",
        }
    }

    /// Does executing a call with raw argument label `label` hit this hazard?
    pub fn on_call(self, manifest: &ToolManifest, recipients: &[Principal], label: &LabelSet) -> bool {
        if !manifest.has_capability(Capability::ExternalWrite) {
            return false;
        }
        match self {
            Hazard::PrivateLeak if recipients.is_empty() => !label.confidentiality().is_public(),
            Hazard::PrivateLeak => recipients.iter().any(|r| !label.flows_to(r)),
            Hazard::UntrustedWrite => label.trust() == TrustLevel::Untrusted,
            Hazard::ObligationUnmetAtEnd => false,
        }
    }

    pub fn on_state(self, obligations: &ObligationState) -> bool {
        self == Hazard::ObligationUnmetAtEnd && !obligations.is_empty()
    }
}

impl fmt::Display for Hazard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Hazard {
    type Err = VerifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Hazard::ALL.into_iter().find(|h| h.as_str() == s).ok_or_else(|| VerifyError::UnknownHazard(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfirmationMode {
    /// Explore both approve and deny.
    Branch,
    /// Assume every confirmation is denied.
    DenyOnly,
}

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub bound: usize,
    pub universe: usize,
    pub internal_domains: Vec<String>,
    pub confirmations: ConfirmationMode,
    pub state_cap: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            bound: DEFAULT_BOUND,
            universe: DEFAULT_UNIVERSE,
            internal_domains: vec![crate::harness::INTERNAL_DOMAIN.into()],
            confirmations: ConfirmationMode::Branch,
            state_cap: DEFAULT_STATE_CAP,
        }
    }
}

impl VerifyConfig {
    pub fn with_bound(mut self, bound: usize) -> Self {
        self.bound = bound;
        self
    }

    pub fn with_universe(mut self, universe: usize) -> Self {
        self.universe = universe;
        self
    }

    pub fn settings(&self) -> EvalSettings {
        EvalSettings::with_internal_domains(&self.internal_domains)
    }
}

/// Owner first, then an internal colleague, then outsiders.
pub fn universe(n: usize) -> Vec<Principal> {
    let base = [crate::harness::OWNER, crate::harness::COLLEAGUE, crate::harness::PARTNER];
    (0..n)
        .map(|i| match base.get(i) {
            Some(p) => Principal::from(*p),
            None => Principal::from(format!("p{i}@other.example").as_str()),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputChoice {
    pub field: String,
    /// Declared label with the audience resolved, before any join.
    pub label: LabelSet,
}

/// One step of an abstract trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractCall {
    pub tool: String,
    /// Placeholder arguments; only the principals matter.
    pub arguments: Map<String, Value>,
    pub recipients: Vec<Principal>,
    /// Context labels every argument is derived from.
    pub cites: Vec<LabelSet>,
    pub arg_label: LabelSet,
    pub outputs: Vec<OutputChoice>,
    pub decision: Decision,
    /// Executed only because the owner approved a confirmation.
    pub approved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub hazard: Hazard,
    pub steps: Vec<AbstractCall>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum VerificationResult {
    Safe { bound: usize, states_explored: usize },
    Unsafe { bound: usize, states_explored: usize, counterexample: Counterexample },
}

impl VerificationResult {
    pub fn is_safe(&self) -> bool {
        matches!(self, VerificationResult::Safe { .. })
    }

    pub fn states_explored(&self) -> usize {
        match self {
            VerificationResult::Safe { states_explored, .. } | VerificationResult::Unsafe { states_explored, .. } => {
                *states_explored
            }
        }
    }

    pub fn counterexample(&self) -> Option<&Counterexample> {
        match self {
            VerificationResult::Unsafe { counterexample, .. } => Some(counterexample),
            VerificationResult::Safe { .. } => None,
        }
    }

    /// `{verdict, bound, states, counterexample?}`
    pub fn report(&self) -> Value {
        match self {
            VerificationResult::Safe { bound, states_explored } => {
                json!({"verdict": "safe", "bound": bound, "states": states_explored})
            }
            VerificationResult::Unsafe { bound, states_explored, counterexample } => json!({
                "verdict": "unsafe",
                "bound": bound,
                "states": states_explored,
                "counterexample": counterexample,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct AbstractState {
    context: BTreeSet<LabelSet>,
    obligations: ObligationState,
}

struct Transition {
    call: AbstractCall,
    next: AbstractState,
    hazard: Option<Hazard>,
    discharged: bool,
}

/// The transition system induced by a manifest set and a policy.
struct Model<'a> {
    manifests: &'a ManifestSet,
    policy: &'a PolicySet,
    settings: EvalSettings,
    universe: Vec<Principal>,
    mode: ConfirmationMode,
    hazards: Vec<Hazard>,
}

impl<'a> Model<'a> {
    fn new(
        manifests: &'a ManifestSet,
        policy: &'a PolicySet,
        hazards: &[Hazard],
        config: &VerifyConfig,
    ) -> Result<Self, VerifyError> {
        if config.universe == 0 {
            return Err(VerifyError::EmptyUniverse);
        }
        Ok(Model {
            manifests,
            policy,
            settings: config.settings(),
            universe: universe(config.universe),
            mode: config.confirmations,
            hazards: hazards.to_vec(),
        })
    }

    fn owner(&self) -> &Principal {
        &self.universe[0]
    }

    fn successors(&self, st: &AbstractState, step: u64) -> Vec<Transition> {
        let mut out = Vec::new();
        let cites = cite_options(&st.context);
        for manifest in self.manifests.iter() {
            let principal_params: Vec<&str> = manifest.principal_params().map(|p| p.name.as_str()).collect();
            for chosen in product(&self.universe, principal_params.len()) {
                let args = synthetic_args(manifest, &principal_params, &chosen);
                let recipients = manifest.recipients(&args);
                let cite_choices: &[(Vec<LabelSet>, LabelSet)] = if args.is_empty() { &cites[..1] } else { &cites };
                for (cited, label) in cite_choices {
                    let arg_labels = args.keys().map(|k| (k.clone(), label.clone())).collect();
                    let input = EvalInput {
                        manifest,
                        recipients: &recipients,
                        arg_labels: &arg_labels,
                        obligations: &st.obligations,
                    };
                    let decision = evaluate(input, self.policy, &self.settings, "");
                    let approved = match decision.verdict {
                        Verdict::Allow => false,
                        Verdict::Confirm { .. } if self.mode == ConfirmationMode::Branch => true,
                        _ => continue,
                    };
                    let hazard = self.hazards.iter().copied().find(|h| h.on_call(manifest, &recipients, label));
                    let discharged = st.obligations.discharges(
                        self.policy.active_obligations(),
                        crate::obligation::CallShape { tool: &manifest.tool_name, recipients: &recipients },
                    );
                    for outputs in self.output_choices(manifest) {
                        let next = self.apply(st, manifest, &args, &recipients, label, &outputs, step);
                        let call = AbstractCall {
                            tool: manifest.tool_name.clone(),
                            arguments: args.clone(),
                            recipients: recipients.clone(),
                            cites: cited.clone(),
                            arg_label: label.clone(),
                            outputs: outputs.iter().map(|(o, _)| o.clone()).collect(),
                            decision: decision.clone(),
                            approved,
                        };
                        let hazard =
                            hazard.or_else(|| self.hazards.iter().copied().find(|h| h.on_state(&next.obligations)));
                        out.push(Transition { call, next, hazard, discharged });
                    }
                }
            }
        }
        out
    }

    /// Every combination of output audiences, with the synthetic value that
    /// produces each.
    fn output_choices(&self, manifest: &ToolManifest) -> Vec<Vec<(OutputChoice, Value)>> {
        let mut combos: Vec<Vec<(OutputChoice, Value)>> = vec![Vec::new()];
        for spec in &manifest.outputs {
            let options = self.field_options(spec);
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    options.iter().map(move |o| {
                        let mut c = c.clone();
                        c.push(o.clone());
                        c
                    })
                })
                .collect();
        }
        combos
    }

    fn field_options(&self, spec: &OutputSpec) -> Vec<(OutputChoice, Value)> {
        let refs = spec.audience_refs();
        if refs.is_empty() {
            let v = json!("ok");
            return vec![(OutputChoice { field: spec.field.clone(), label: spec.instantiate(&v) }, v)];
        }
        let others = &self.universe[1..];
        (0..1usize << others.len())
            .map(|mask| {
                let mut audience = vec![self.owner().as_str().to_owned()];
                audience.extend(
                    others.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, p)| p.as_str().to_owned()),
                );
                let mut v = Map::new();
                for r in &refs {
                    v.insert((*r).to_owned(), json!(audience));
                }
                let v = Value::Object(v);
                (OutputChoice { field: spec.field.clone(), label: spec.instantiate(&v) }, v)
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn apply(
        &self,
        st: &AbstractState,
        manifest: &ToolManifest,
        args: &Map<String, Value>,
        recipients: &[Principal],
        arg_label: &LabelSet,
        outputs: &[(OutputChoice, Value)],
        step: u64,
    ) -> AbstractState {
        let mut context = st.context.clone();
        let tool_trust = LabelSet::bottom().with_trust(manifest.trust);
        let mut result = Map::new();
        for (choice, value) in outputs {
            let parents = if args.is_empty() { LabelSet::bottom() } else { arg_label.clone() };
            context.insert(choice.label.join(&tool_trust).join(&parents));
            result.insert(choice.field.clone(), value.clone());
        }
        let executed = ExecutedCall {
            call_id: step,
            tool: manifest.tool_name.clone(),
            arguments: args.clone(),
            recipients: recipients.to_vec(),
            result: Value::Object(result),
            actor: self.owner().clone(),
        };
        let mut obligations = st.obligations.clone();
        obligations.on_call(self.policy.active_obligations(), &executed);
        AbstractState { context, obligations: obligations.canonical() }
    }
}

/// Distinct argument labels obtainable from the context, each with the
/// smallest (first found) set of cited labels producing it. Bottom first.
fn cite_options(context: &BTreeSet<LabelSet>) -> Vec<(Vec<LabelSet>, LabelSet)> {
    let labels: Vec<&LabelSet> = context.iter().collect();
    let mut masks: Vec<usize> = (0..1usize << labels.len()).collect();
    masks.sort_by_key(|m| (m.count_ones(), *m));
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for m in masks {
        let cited: Vec<LabelSet> =
            labels.iter().enumerate().filter(|(i, _)| m & (1 << i) != 0).map(|(_, l)| (*l).clone()).collect();
        let join = LabelSet::join_all(cited.iter());
        if seen.insert(join.clone()) {
            out.push((cited, join));
        }
    }
    out
}

fn product(universe: &[Principal], n: usize) -> Vec<Vec<Principal>> {
    (0..n).fold(vec![Vec::new()], |acc, _| {
        acc.into_iter()
            .flat_map(|prefix| {
                universe.iter().map(move |p| {
                    let mut v = prefix.clone();
                    v.push(p.clone());
                    v
                })
            })
            .collect()
    })
}

/// Placeholder arguments: principals as chosen, everything else a dummy.
pub(crate) fn synthetic_args(
    manifest: &ToolManifest,
    principal_params: &[&str],
    chosen: &[Principal],
) -> Map<String, Value> {
    let mut args = Map::new();
    for p in &manifest.params {
        let v = match p.kind {
            ParamKind::Principal => {
                let i = principal_params.iter().position(|n| *n == p.name).expect("principal param");
                json!(chosen[i].as_str())
            }
            ParamKind::String => json!("x"),
            ParamKind::Integer => json!(0),
            ParamKind::Boolean => json!(false),
            ParamKind::Object => json!({}),
        };
        args.insert(p.name.clone(), v);
    }
    args
}

struct Node {
    state: AbstractState,
    parent: Option<usize>,
    via: Option<AbstractCall>,
}

fn path(nodes: &[Node], mut idx: usize) -> Vec<AbstractCall> {
    let mut steps = Vec::new();
    while let Some(parent) = nodes[idx].parent {
        steps.push(nodes[idx].via.clone().expect("non-root has a call"));
        idx = parent;
    }
    steps.reverse();
    steps
}

/// Prove `hazards` unreachable within `config.bound` steps, or return a
/// shortest trace reaching one.
pub fn check(
    manifests: &ManifestSet,
    policy: &PolicySet,
    hazards: &[Hazard],
    config: &VerifyConfig,
) -> Result<VerificationResult, VerifyError> {
    let model = Model::new(manifests, policy, hazards, config)?;
    let root = AbstractState { context: BTreeSet::new(), obligations: ObligationState::default() };
    if let Some(h) = hazards.iter().copied().find(|h| h.on_state(&root.obligations)) {
        let counterexample = Counterexample { hazard: h, steps: Vec::new() };
        return Ok(VerificationResult::Unsafe { bound: config.bound, states_explored: 1, counterexample });
    }
    let mut index: HashMap<AbstractState, usize> = HashMap::new();
    index.insert(root.clone(), 0);
    let mut nodes = vec![Node { state: root, parent: None, via: None }];
    let mut frontier = vec![0usize];

    for depth in 0..config.bound {
        if frontier.is_empty() {
            break;
        }
        // expansion is parallel; merging walks results in frontier order
        let expanded: Vec<Vec<Transition>> =
            frontier.par_iter().map(|&i| model.successors(&nodes[i].state, depth as u64 + 1)).collect();
        let mut next_frontier = Vec::new();
        for (&parent, transitions) in frontier.iter().zip(expanded) {
            for t in transitions {
                if let Some(hazard) = t.hazard {
                    let mut steps = path(&nodes, parent);
                    steps.push(t.call);
                    return Ok(VerificationResult::Unsafe {
                        bound: config.bound,
                        states_explored: nodes.len(),
                        counterexample: Counterexample { hazard, steps },
                    });
                }
                if index.contains_key(&t.next) {
                    continue;
                }
                if nodes.len() >= config.state_cap {
                    return Err(VerifyError::UniverseTooLarge { cap: config.state_cap });
                }
                index.insert(t.next.clone(), nodes.len());
                next_frontier.push(nodes.len());
                nodes.push(Node { state: t.next, parent: Some(parent), via: Some(t.call) });
            }
        }
        frontier = next_frontier;
    }
    Ok(VerificationResult::Safe { bound: config.bound, states_explored: nodes.len() })
}

/// A trace shape to look for: the tools must occur in this order (other
/// calls may interleave), and the trace must end with no open obligation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub sequence: Vec<String>,
    /// At least one step must discharge an obligation.
    pub require_discharge: bool,
    /// Whether steps may rely on an approved confirmation.
    pub allow_confirmations: bool,
}

impl Goal {
    /// Read the calendar, reschedule, and notify everyone, with no human
    /// in the loop.
    pub fn update_then_notify() -> Goal {
        Goal {
            sequence: vec!["list_events".into(), "update_event".into(), "send_email".into()],
            require_discharge: true,
            allow_confirmations: false,
        }
    }
}

/// Shortest hazard-free trace matching `goal`, if one exists within the bound.
pub fn witness(
    manifests: &ManifestSet,
    policy: &PolicySet,
    goal: &Goal,
    config: &VerifyConfig,
) -> Result<Option<Vec<AbstractCall>>, VerifyError> {
    let avoid = [Hazard::PrivateLeak, Hazard::UntrustedWrite];
    let model = Model::new(manifests, policy, &avoid, config)?;
    type Key = (AbstractState, usize, bool);
    let done = |k: &Key| k.1 == goal.sequence.len() && (k.2 || !goal.require_discharge) && k.0.obligations.is_empty();
    let root: Key = (AbstractState { context: BTreeSet::new(), obligations: ObligationState::default() }, 0, false);
    let mut seen: HashMap<Key, usize> = HashMap::new();
    let mut nodes: Vec<(Key, Option<usize>, Option<AbstractCall>)> = vec![(root.clone(), None, None)];
    seen.insert(root.clone(), 0);
    if done(&root) {
        return Ok(Some(Vec::new()));
    }
    let mut frontier = vec![0usize];
    for depth in 0..config.bound {
        let mut next_frontier = Vec::new();
        for &i in &frontier {
            let (state, progress, discharged) = nodes[i].0.clone();
            for t in model.successors(&state, depth as u64 + 1) {
                if t.hazard.is_some() || (t.call.approved && !goal.allow_confirmations) {
                    continue;
                }
                let progress = if goal.sequence.get(progress) == Some(&t.call.tool) { progress + 1 } else { progress };
                let key: Key = (t.next, progress, discharged || t.discharged);
                if seen.contains_key(&key) {
                    continue;
                }
                if nodes.len() >= config.state_cap {
                    return Err(VerifyError::UniverseTooLarge { cap: config.state_cap });
                }
                let finished = done(&key);
                seen.insert(key.clone(), nodes.len());
                nodes.push((key, Some(i), Some(t.call)));
                if finished {
                    let mut steps = Vec::new();
                    let mut j = nodes.len() - 1;
                    while let Some(p) = nodes[j].1 {
                        steps.push(nodes[j].2.clone().expect("non-root has a call"));
                        j = p;
                    }
                    steps.reverse();
                    return Ok(Some(steps));
                }
                next_frontier.push(nodes.len() - 1);
            }
        }
        frontier = next_frontier;
    }
    Ok(None)
}
