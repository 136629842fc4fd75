//! Four-tier policy evaluation.
//!
//! Precedence, first match wins:
//!
//! 1. a blocklist rule matches any argument flow -> `Block`
//! 2. a pending mustlist obligation forbids the call -> `ObligationViolation`
//! 3. an allowlist rule matches every argument flow -> `Allow`
//! 4. a confirmation rule matches any argument flow -> `Confirm`
//! 5. otherwise `Allow` when every argument label is bottom, else `Confirm`
//!
//! Predicates form a closed vocabulary over labels, tool metadata and
//! recipients. All built-in data predicates except `public` are monotone in
//! the label order.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::label::{Capability, LabelSet, Principal, Ternary, TrustLevel};
use crate::manifest::{ManifestSet, ToolManifest};
use crate::obligation::{CallShape, ObligationSpec, ObligationState};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("policy syntax error: {0}")]
    Syntax(String),
    #[error("policy references unknown tool `{0}`")]
    UnknownTool(String),
    #[error("policy references unknown label key `{0}`")]
    UnknownLabelKey(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Blocklist,
    Mustlist,
    Allowlist,
    Confirmation,
}

impl Tier {
    fn parse(s: &str) -> Option<Tier> {
        Some(match s {
            "blocklist" => Tier::Blocklist,
            "mustlist" => Tier::Mustlist,
            "allowlist" => Tier::Allowlist,
            "confirmation" => Tier::Confirmation,
            _ => return None,
        })
    }

    fn as_str(self) -> &'static str {
        match self {
            Tier::Blocklist => "blocklist",
            Tier::Mustlist => "mustlist",
            Tier::Allowlist => "allowlist",
            Tier::Confirmation => "confirmation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfidentialityTest {
    /// The label does not flow to some recipient (to anyone but everyone,
    /// when the call has no recipient).
    PrivateToNonRecipient,
    Private,
    Public,
}

impl ConfidentialityTest {
    fn as_str(self) -> &'static str {
        match self {
            ConfidentialityTest::PrivateToNonRecipient => "private-to-non-recipient",
            ConfidentialityTest::Private => "private",
            ConfidentialityTest::Public => "public",
        }
    }
}

/// Conjunction of label constraints on one argument flow.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DataPredicate {
    pub confidentiality: Option<ConfidentialityTest>,
    pub trust_at_most: Option<TrustLevel>,
    pub tag_at_least: Option<(String, Ternary)>,
}

impl DataPredicate {
    fn is_empty(&self) -> bool {
        self.confidentiality.is_none() && self.trust_at_most.is_none() && self.tag_at_least.is_none()
    }

    pub fn matches(&self, label: &LabelSet, recipients: &[Principal]) -> bool {
        if let Some(c) = self.confidentiality {
            let public = label.confidentiality().is_public();
            let ok = match c {
                ConfidentialityTest::Public => public,
                ConfidentialityTest::Private => !public,
                ConfidentialityTest::PrivateToNonRecipient if recipients.is_empty() => !public,
                ConfidentialityTest::PrivateToNonRecipient => recipients.iter().any(|r| !label.flows_to(r)),
            };
            if !ok {
                return false;
            }
        }
        if let Some(t) = self.trust_at_most {
            if label.trust() > t {
                return false;
            }
        }
        if let Some((key, min)) = &self.tag_at_least {
            if label.tag(key) < *min {
                return false;
            }
        }
        true
    }

    fn to_json(&self) -> Value {
        let mut m = Map::new();
        if let Some(c) = self.confidentiality {
            m.insert("confidentiality".into(), json!(c.as_str()));
        }
        if let Some(t) = self.trust_at_most {
            m.insert("trust_at_most".into(), json!(t.as_str()));
        }
        if let Some((k, v)) = &self.tag_at_least {
            m.insert("tag_at_least".into(), json!({"key": k, "value": v.as_str()}));
        }
        Value::Object(m)
    }
}

/// Conjunction of constraints on the sink (the tool being called).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SinkPredicate {
    pub capability: Option<Capability>,
    pub tool: Option<String>,
    pub recipient_external: Option<bool>,
    /// The call discharges an outstanding mustlist requirement.
    pub discharges_obligation: Option<bool>,
}

impl SinkPredicate {
    fn is_empty(&self) -> bool {
        self.capability.is_none()
            && self.tool.is_none()
            && self.recipient_external.is_none()
            && self.discharges_obligation.is_none()
    }

    fn matches(&self, call: &CallContext<'_>) -> bool {
        if let Some(c) = self.capability {
            if !call.manifest.has_capability(c) {
                return false;
            }
        }
        if let Some(t) = &self.tool {
            if *t != call.manifest.tool_name {
                return false;
            }
        }
        if let Some(want) = self.recipient_external {
            let external = call.recipients.iter().any(|r| call.is_external(r));
            if external != want {
                return false;
            }
        }
        if let Some(want) = self.discharges_obligation {
            if call.discharges_obligation != want {
                return false;
            }
        }
        true
    }

    fn to_json(&self) -> Value {
        let mut m = Map::new();
        if let Some(c) = self.capability {
            m.insert("capability".into(), json!(c.as_str()));
        }
        if let Some(t) = &self.tool {
            m.insert("tool".into(), json!(t));
        }
        if let Some(b) = self.recipient_external {
            m.insert("recipient_external".into(), json!(b));
        }
        if let Some(b) = self.discharges_obligation {
            m.insert("discharges_obligation".into(), json!(b));
        }
        Value::Object(m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowPattern {
    pub data: DataPredicate,
    pub sink: SinkPredicate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleBody {
    Flow(FlowPattern),
    Obligation(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyRule {
    pub id: String,
    pub tier: Tier,
    pub body: RuleBody,
}

impl PolicyRule {
    pub fn flow(id: impl Into<String>, tier: Tier, data: DataPredicate, sink: SinkPredicate) -> Self {
        PolicyRule { id: id.into(), tier, body: RuleBody::Flow(FlowPattern { data, sink }) }
    }

    fn pattern(&self) -> Option<&FlowPattern> {
        match &self.body {
            RuleBody::Flow(p) => Some(p),
            RuleBody::Obligation(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PolicySet {
    rules: Vec<PolicyRule>,
    obligations: Vec<ObligationSpec>,
    active: Vec<ObligationSpec>,
}

impl PolicySet {
    pub fn empty() -> Self {
        PolicySet::default()
    }

    /// Build from parts; checks tier/pattern agreement and obligation references.
    pub fn new(rules: Vec<PolicyRule>, obligations: Vec<ObligationSpec>) -> Result<Self, PolicyError> {
        let mut ids = HashSet::new();
        for r in &rules {
            if !ids.insert(r.id.as_str()) {
                return Err(PolicyError::Syntax(format!("duplicate rule id `{}`", r.id)));
            }
            match (&r.body, r.tier) {
                (RuleBody::Obligation(_), Tier::Mustlist) => {}
                (RuleBody::Flow(_), t) if t != Tier::Mustlist => {}
                _ => {
                    return Err(PolicyError::Syntax(format!(
                        "rule `{}`: tier {} does not match its pattern kind",
                        r.id,
                        r.tier.as_str()
                    )))
                }
            }
            if let RuleBody::Flow(p) = &r.body {
                if p.data.is_empty() || p.sink.is_empty() {
                    return Err(PolicyError::Syntax(format!(
                        "rule `{}` needs at least one data and one sink constraint",
                        r.id
                    )));
                }
            }
        }
        let mut spec_ids = HashSet::new();
        for o in &obligations {
            if !spec_ids.insert(o.id.as_str()) {
                return Err(PolicyError::Syntax(format!("duplicate obligation id `{}`", o.id)));
            }
            if !o.is_well_formed() {
                return Err(PolicyError::Syntax(format!(
                    "obligation `{}`: for_each `{}` must start with the bound name `{}`",
                    o.id, o.required.for_each, o.trigger.bind
                )));
            }
        }
        let mut active = Vec::new();
        for r in &rules {
            if let RuleBody::Obligation(spec_id) = &r.body {
                let spec = obligations.iter().find(|o| &o.id == spec_id).ok_or_else(|| {
                    PolicyError::Syntax(format!("rule `{}` references unknown obligation `{spec_id}`", r.id))
                })?;
                if !active.contains(spec) {
                    active.push(spec.clone());
                }
            }
        }
        Ok(PolicySet { rules, obligations, active })
    }

    pub fn rules(&self) -> &[PolicyRule] {
        &self.rules
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Obligation specs enforced by some mustlist rule.
    pub fn active_obligations(&self) -> &[ObligationSpec] {
        &self.active
    }

    /// The same policy with one more rule appended.
    pub fn with_rule(&self, rule: PolicyRule) -> Result<Self, PolicyError> {
        let mut rules = self.rules.clone();
        rules.push(rule);
        PolicySet::new(rules, self.obligations.clone())
    }

    /// Check tool names and label keys against a manifest set.
    pub fn validate_against(&self, manifests: &ManifestSet) -> Result<(), PolicyError> {
        let keys = manifests.label_keys();
        let known_tool = |t: &str| {
            if manifests.get(t).is_some() {
                Ok(())
            } else {
                Err(PolicyError::UnknownTool(t.to_owned()))
            }
        };
        for r in &self.rules {
            if let RuleBody::Flow(p) = &r.body {
                if let Some(t) = &p.sink.tool {
                    known_tool(t)?;
                }
                if let Some((k, _)) = &p.data.tag_at_least {
                    if !keys.contains(k) {
                        return Err(PolicyError::UnknownLabelKey(k.clone()));
                    }
                }
            }
        }
        for o in &self.obligations {
            known_tool(&o.trigger.tool)?;
            known_tool(&o.required.tool)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let rules: Vec<Value> = self
            .rules
            .iter()
            .map(|r| {
                let when = match &r.body {
                    RuleBody::Flow(p) => json!({"data": p.data.to_json(), "sink": p.sink.to_json()}),
                    RuleBody::Obligation(id) => json!({"obligation": id}),
                };
                json!({"id": r.id, "tier": r.tier.as_str(), "when": when})
            })
            .collect();
        json!({"rules": rules, "obligations": self.obligations})
    }
}

/// Parse a policy document and validate it against `manifests`.
pub fn parse_policy(text: &str, manifests: &ManifestSet) -> Result<PolicySet, PolicyError> {
    if text.trim().is_empty() {
        return Ok(PolicySet::empty());
    }
    let doc: Value = serde_json::from_str(text).map_err(|e| PolicyError::Syntax(e.to_string()))?;
    let policy = parse_policy_value(&doc)?;
    policy.validate_against(manifests)?;
    Ok(policy)
}

/// Parse without manifest cross-validation.
pub fn parse_policy_value(doc: &Value) -> Result<PolicySet, PolicyError> {
    let syntax = |m: String| PolicyError::Syntax(m);
    let obj = doc.as_object().ok_or_else(|| syntax("policy must be a JSON object".into()))?;
    for k in obj.keys() {
        if k != "rules" && k != "obligations" {
            return Err(syntax(format!("unknown top-level key `{k}`")));
        }
    }
    let mut rules = Vec::new();
    for (i, r) in array(obj.get("rules"), "rules")?.iter().enumerate() {
        rules.push(parse_rule(r, i)?);
    }
    let mut obligations = Vec::new();
    for o in array(obj.get("obligations"), "obligations")? {
        let spec: ObligationSpec = serde_json::from_value(o.clone()).map_err(|e| syntax(format!("obligation: {e}")))?;
        obligations.push(spec);
    }
    PolicySet::new(rules, obligations)
}

fn array<'a>(v: Option<&'a Value>, key: &str) -> Result<&'a [Value], PolicyError> {
    match v {
        None => Ok(&[]),
        Some(Value::Array(a)) => Ok(a),
        Some(_) => Err(PolicyError::Syntax(format!("`{key}` must be an array"))),
    }
}

fn parse_rule(r: &Value, index: usize) -> Result<PolicyRule, PolicyError> {
    let syntax = |m: String| PolicyError::Syntax(format!("rules[{index}]: {m}"));
    let obj = r.as_object().ok_or_else(|| syntax("not an object".into()))?;
    let id = obj
        .get("id")
        .and_then(Value::as_str)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| syntax("missing `id`".into()))?
        .to_owned();
    let tier = obj
        .get("tier")
        .and_then(Value::as_str)
        .and_then(Tier::parse)
        .ok_or_else(|| syntax("missing or unknown `tier`".into()))?;
    let when = obj.get("when").and_then(Value::as_object).ok_or_else(|| syntax("missing `when`".into()))?;
    let body = if let Some(o) = when.get("obligation") {
        let spec = o.as_str().ok_or_else(|| syntax("`obligation` must be a string".into()))?;
        RuleBody::Obligation(spec.to_owned())
    } else {
        let data = parse_data(when.get("data")).map_err(&syntax)?;
        let sink = parse_sink(when.get("sink")).map_err(&syntax)?;
        RuleBody::Flow(FlowPattern { data, sink })
    };
    Ok(PolicyRule { id, tier, body })
}

fn parse_data(v: Option<&Value>) -> Result<DataPredicate, String> {
    let obj = v.and_then(Value::as_object).ok_or("`when.data` must be an object")?;
    let mut d = DataPredicate::default();
    for (k, v) in obj {
        match k.as_str() {
            "confidentiality" => {
                d.confidentiality = Some(match v.as_str() {
                    Some("private-to-non-recipient") => ConfidentialityTest::PrivateToNonRecipient,
                    Some("private") => ConfidentialityTest::Private,
                    Some("public") => ConfidentialityTest::Public,
                    _ => return Err(format!("bad data.confidentiality {v}")),
                })
            }
            "trust_at_most" => {
                let s = v.as_str().ok_or("data.trust_at_most must be a string")?;
                d.trust_at_most = Some(s.parse().map_err(|e: crate::label::LabelError| e.to_string())?);
            }
            "tag_at_least" => {
                let key = v.get("key").and_then(Value::as_str).ok_or("data.tag_at_least needs `key`")?;
                let value = v
                    .get("value")
                    .and_then(Value::as_str)
                    .ok_or("data.tag_at_least needs `value`")?
                    .parse::<Ternary>()?;
                d.tag_at_least = Some((key.to_owned(), value));
            }
            other => return Err(format!("unknown data predicate `{other}`")),
        }
    }
    Ok(d)
}

fn parse_sink(v: Option<&Value>) -> Result<SinkPredicate, String> {
    let obj = v.and_then(Value::as_object).ok_or("`when.sink` must be an object")?;
    let mut s = SinkPredicate::default();
    for (k, v) in obj {
        match k.as_str() {
            "capability" => {
                s.capability = Some(v.as_str().ok_or("sink.capability must be a string")?.parse()?);
            }
            "tool" => s.tool = Some(v.as_str().ok_or("sink.tool must be a string")?.to_owned()),
            "recipient_external" => {
                s.recipient_external = Some(v.as_bool().ok_or("sink.recipient_external must be boolean")?)
            }
            "discharges_obligation" => {
                s.discharges_obligation = Some(v.as_bool().ok_or("sink.discharges_obligation must be boolean")?)
            }
            other => return Err(format!("unknown sink predicate `{other}`")),
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Allow,
    Block { rule: String },
    Confirm { pending_id: String, reason: String },
    ObligationViolation { obligation: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    #[serde(flatten)]
    pub verdict: Verdict,
    pub matched_rules: Vec<String>,
}

impl Decision {
    pub fn is_allow(&self) -> bool {
        matches!(self.verdict, Verdict::Allow)
    }
}

/// Session-level settings that predicates may consult.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalSettings {
    /// Lower-cased email domains treated as internal.
    pub internal_domains: Vec<String>,
}

impl EvalSettings {
    pub fn with_internal_domains<I: IntoIterator<Item = S>, S: AsRef<str>>(domains: I) -> Self {
        EvalSettings { internal_domains: domains.into_iter().map(|d| d.as_ref().to_lowercase()).collect() }
    }
}

struct CallContext<'a> {
    manifest: &'a ToolManifest,
    recipients: &'a [Principal],
    settings: &'a EvalSettings,
    discharges_obligation: bool,
}

impl CallContext<'_> {
    fn is_external(&self, p: &Principal) -> bool {
        match p.domain() {
            Some(d) => !self.settings.internal_domains.iter().any(|i| i == d),
            None => true,
        }
    }
}

/// Everything `evaluate` looks at for one proposed call.
#[derive(Debug, Clone, Copy)]
pub struct EvalInput<'a> {
    pub manifest: &'a ToolManifest,
    pub recipients: &'a [Principal],
    pub arg_labels: &'a BTreeMap<String, LabelSet>,
    pub obligations: &'a ObligationState,
}

/// Decide a proposed call. `pending_id` is used only if the verdict is `Confirm`.
pub fn evaluate(input: EvalInput<'_>, policy: &PolicySet, settings: &EvalSettings, pending_id: &str) -> Decision {
    let specs = policy.active_obligations();
    let shape = CallShape { tool: &input.manifest.tool_name, recipients: input.recipients };
    let ctx = CallContext {
        manifest: input.manifest,
        recipients: input.recipients,
        settings,
        discharges_obligation: input.obligations.discharges(specs, shape),
    };
    let labels: Vec<&LabelSet> = input.arg_labels.values().collect();

    let mut matched = Vec::new();
    let mut block = None;
    let mut allow = None;
    let mut confirm = None;
    for rule in &policy.rules {
        let Some(p) = rule.pattern() else { continue };
        if !p.sink.matches(&ctx) {
            continue;
        }
        let hit = match rule.tier {
            Tier::Allowlist => labels.iter().all(|l| p.data.matches(l, input.recipients)),
            _ => labels.iter().any(|l| p.data.matches(l, input.recipients)),
        };
        if !hit {
            continue;
        }
        matched.push(rule.id.clone());
        let slot = match rule.tier {
            Tier::Blocklist => &mut block,
            Tier::Allowlist => &mut allow,
            Tier::Confirmation => &mut confirm,
            Tier::Mustlist => continue,
        };
        slot.get_or_insert_with(|| rule.id.clone());
    }

    let obligation = input.obligations.directness_violation(specs, shape);
    if let Some(spec_id) = &obligation {
        for r in &policy.rules {
            if matches!(&r.body, RuleBody::Obligation(id) if id == spec_id) {
                matched.push(r.id.clone());
            }
        }
    }

    let verdict = if let Some(rule) = block {
        Verdict::Block { rule }
    } else if let Some(obligation) = obligation {
        Verdict::ObligationViolation { obligation }
    } else if allow.is_some() {
        Verdict::Allow
    } else if let Some(rule) = confirm {
        Verdict::Confirm { pending_id: pending_id.to_owned(), reason: rule }
    } else if labels.iter().all(|l| l.is_bottom()) {
        Verdict::Allow
    } else {
        Verdict::Confirm { pending_id: pending_id.to_owned(), reason: "default".into() }
    };
    Decision { verdict, matched_rules: matched }
}
