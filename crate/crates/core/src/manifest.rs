//! Capability-enhanced tool manifests.
//!
//! A manifest declares, for every tool, its capabilities, its trust level and
//! a mandatory label on every output field. Parsing rejects any tool that is
//! missing one of those three label categories.
//!
//! An output label's audience may reference a member of the produced value:
//! an entry written `"$attendees"` is replaced at ingest time by the
//! principals found under the value's `attendees` member.

use std::collections::{BTreeSet, HashSet};

use serde::Serialize;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::label::{Capability, Confidentiality, LabelError, LabelSet, Principal, TrustLevel};

/// Prefix marking an audience entry as a reference into the output value.
pub const AUDIENCE_REF_PREFIX: char = '$';

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManifestError {
    #[error("manifest syntax error: {0}")]
    Syntax(String),
    #[error("tool `{tool}` is missing mandatory label `{key}`")]
    MissingLabel { tool: String, key: String },
    #[error("duplicate tool `{0}`")]
    DuplicateTool(String),
    #[error("tool `{tool}`: {reason}")]
    Invalid { tool: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    String,
    Integer,
    Boolean,
    Principal,
    Object,
}

impl ParamKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "string" => ParamKind::String,
            "integer" => ParamKind::Integer,
            "boolean" => ParamKind::Boolean,
            "principal" => ParamKind::Principal,
            "object" => ParamKind::Object,
            _ => return None,
        })
    }

    fn as_str(self) -> &'static str {
        match self {
            ParamKind::String => "string",
            ParamKind::Integer => "integer",
            ParamKind::Boolean => "boolean",
            ParamKind::Principal => "principal",
            ParamKind::Object => "object",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub required: bool,
    /// Strictest label this parameter may receive without policy mediation.
    pub accepts_max: LabelSet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputSpec {
    pub field: String,
    pub label: LabelSet,
}

impl OutputSpec {
    /// Member names referenced by `$name` audience entries.
    pub fn audience_refs(&self) -> Vec<&str> {
        match self.label.confidentiality() {
            Confidentiality::Everyone => Vec::new(),
            Confidentiality::Audience(set) => {
                set.iter().filter_map(|p| p.as_str().strip_prefix(AUDIENCE_REF_PREFIX)).collect()
            }
        }
    }

    /// The declared label with audience references resolved against `value`.
    /// References to members that are absent contribute no principal.
    pub fn instantiate(&self, value: &Value) -> LabelSet {
        let Confidentiality::Audience(set) = self.label.confidentiality() else {
            return self.label.clone();
        };
        let mut audience = BTreeSet::new();
        for p in set {
            match p.as_str().strip_prefix(AUDIENCE_REF_PREFIX) {
                None => {
                    audience.insert(p.clone());
                }
                Some(member) => audience.extend(principals_in(value.get(member))),
            }
        }
        self.label.clone().with_confidentiality(Confidentiality::Audience(audience))
    }
}

/// Principals found in a string or an array of strings.
pub fn principals_in(v: Option<&Value>) -> Vec<Principal> {
    match v {
        Some(Value::String(s)) => Principal::new(s.as_str()).into_iter().collect(),
        Some(Value::Array(items)) => {
            items.iter().filter_map(Value::as_str).filter_map(|s| Principal::new(s).ok()).collect()
        }
        _ => Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolManifest {
    pub tool_name: String,
    pub capabilities: BTreeSet<Capability>,
    pub trust: TrustLevel,
    pub params: Vec<ParamSpec>,
    pub outputs: Vec<OutputSpec>,
}

impl ToolManifest {
    pub fn has_capability(&self, c: Capability) -> bool {
        self.capabilities.contains(&c)
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn output(&self, field: &str) -> Option<&OutputSpec> {
        self.outputs.iter().find(|o| o.field == field)
    }

    /// Parameters of kind `principal`, i.e. the call's recipients.
    pub fn principal_params(&self) -> impl Iterator<Item = &ParamSpec> {
        self.params.iter().filter(|p| p.kind == ParamKind::Principal)
    }

    /// Recipients named by a concrete argument object.
    pub fn recipients(&self, args: &Map<String, Value>) -> Vec<Principal> {
        let mut out: Vec<Principal> = Vec::new();
        for p in self.principal_params() {
            for r in principals_in(args.get(&p.name)) {
                if !out.contains(&r) {
                    out.push(r);
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Value {
        json!({
            "name": self.tool_name,
            "capabilities": self.capabilities.iter().map(|c| c.as_str()).collect::<Vec<_>>(),
            "trust": self.trust.as_str(),
            "params": self.params.iter().map(|p| json!({
                "name": p.name,
                "kind": p.kind.as_str(),
                "required": p.required,
                "accepts_max": p.accepts_max.to_json(),
            })).collect::<Vec<_>>(),
            "outputs": self.outputs.iter().map(|o| json!({
                "field": o.field,
                "label": o.label.to_json(),
            })).collect::<Vec<_>>(),
        })
    }
}

/// An ordered, name-unique collection of tool manifests.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ManifestSet {
    tools: Vec<ToolManifest>,
}

impl ManifestSet {
    pub fn new(tools: Vec<ToolManifest>) -> Result<Self, ManifestError> {
        let mut seen = HashSet::new();
        for t in &tools {
            if !seen.insert(t.tool_name.clone()) {
                return Err(ManifestError::DuplicateTool(t.tool_name.clone()));
            }
        }
        Ok(ManifestSet { tools })
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        ManifestSet::new(parse_manifest(text)?)
    }

    pub fn get(&self, tool: &str) -> Option<&ToolManifest> {
        self.tools.iter().find(|t| t.tool_name == tool)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ToolManifest> {
        self.tools.iter()
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    /// Every ternary tag key mentioned by any label in the set.
    pub fn label_keys(&self) -> BTreeSet<String> {
        let mut keys = BTreeSet::new();
        for t in &self.tools {
            let labels = t.params.iter().map(|p| &p.accepts_max).chain(t.outputs.iter().map(|o| &o.label));
            for l in labels {
                keys.extend(l.tags().map(|(k, _)| k.to_owned()));
            }
        }
        keys
    }

    pub fn to_json(&self) -> Value {
        json!({ "tools": self.tools.iter().map(ToolManifest::to_json).collect::<Vec<_>>() })
    }
}

impl<'a> IntoIterator for &'a ManifestSet {
    type Item = &'a ToolManifest;
    type IntoIter = std::slice::Iter<'a, ToolManifest>;

    fn into_iter(self) -> Self::IntoIter {
        self.tools.iter()
    }
}

/// Parse a manifest document (`{"tools": [...]}`) and check every invariant.
pub fn parse_manifest(text: &str) -> Result<Vec<ToolManifest>, ManifestError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| ManifestError::Syntax(e.to_string()))?;
    parse_manifest_value(&doc)
}

pub fn parse_manifest_value(doc: &Value) -> Result<Vec<ToolManifest>, ManifestError> {
    let tools = doc
        .get("tools")
        .and_then(Value::as_array)
        .ok_or_else(|| ManifestError::Syntax("top level must be {\"tools\": [...]}".into()))?;
    let mut out = Vec::with_capacity(tools.len());
    let mut names = HashSet::new();
    for (i, t) in tools.iter().enumerate() {
        let tool = parse_tool(t, i)?;
        if !names.insert(tool.tool_name.clone()) {
            return Err(ManifestError::DuplicateTool(tool.tool_name));
        }
        out.push(tool);
    }
    Ok(out)
}

fn parse_tool(t: &Value, index: usize) -> Result<ToolManifest, ManifestError> {
    let obj = t.as_object().ok_or_else(|| ManifestError::Syntax(format!("tools[{index}] is not an object")))?;
    let name = obj
        .get("name")
        .and_then(Value::as_str)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| ManifestError::Syntax(format!("tools[{index}] has no `name`")))?
        .to_owned();
    let missing = |key: &str| ManifestError::MissingLabel { tool: name.clone(), key: key.into() };
    let invalid = |reason: String| ManifestError::Invalid { tool: name.clone(), reason };

    let caps = obj
        .get("capabilities")
        .and_then(Value::as_array)
        .filter(|a| !a.is_empty())
        .ok_or_else(|| missing("capabilities"))?;
    let mut capabilities = BTreeSet::new();
    for c in caps {
        let s = c.as_str().ok_or_else(|| invalid("capabilities must be strings".into()))?;
        capabilities.insert(s.parse::<Capability>().map_err(invalid)?);
    }

    let trust: TrustLevel = obj
        .get("trust")
        .ok_or_else(|| missing("trust"))?
        .as_str()
        .ok_or_else(|| invalid("trust must be a string".into()))?
        .parse()
        .map_err(|e: LabelError| invalid(e.to_string()))?;

    let mut params = Vec::new();
    let mut param_names = HashSet::new();
    for p in array_field(obj, "params").map_err(&invalid)? {
        let po = p.as_object().ok_or_else(|| invalid("param is not an object".into()))?;
        let pname = po
            .get("name")
            .and_then(Value::as_str)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| invalid("param without a name".into()))?;
        if !param_names.insert(pname.to_owned()) {
            return Err(invalid(format!("duplicate param `{pname}`")));
        }
        let kind = po
            .get("kind")
            .and_then(Value::as_str)
            .and_then(ParamKind::parse)
            .ok_or_else(|| invalid(format!("param `{pname}` has no valid `kind`")))?;
        let required = match po.get("required") {
            None => false,
            Some(Value::Bool(b)) => *b,
            Some(_) => return Err(invalid(format!("param `{pname}`: `required` must be boolean"))),
        };
        let accepts_max = LabelSet::from_json(po.get("accepts_max").ok_or_else(|| missing("accepts_max"))?)
            .map_err(|e| label_error(&name, e))?;
        params.push(ParamSpec { name: pname.to_owned(), kind, required, accepts_max });
    }

    let mut outputs = Vec::new();
    let mut fields = HashSet::new();
    for o in array_field(obj, "outputs").map_err(&invalid)? {
        let oo = o.as_object().ok_or_else(|| invalid("output is not an object".into()))?;
        let field = oo
            .get("field")
            .and_then(Value::as_str)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| invalid("output without a field name".into()))?;
        if !fields.insert(field.to_owned()) {
            return Err(invalid(format!("duplicate output field `{field}`")));
        }
        let mut raw = oo.get("label").ok_or_else(|| missing("confidentiality"))?.clone();
        // Output labels inherit the tool's trust unless they state their own.
        if let Some(m) = raw.as_object_mut() {
            m.entry("trust").or_insert_with(|| Value::String(trust.as_str().into()));
        }
        let label = LabelSet::from_json(&raw).map_err(|e| label_error(&name, e))?;
        outputs.push(OutputSpec { field: field.to_owned(), label });
    }

    Ok(ToolManifest { tool_name: name, capabilities, trust, params, outputs })
}

fn array_field<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a [Value], String> {
    match obj.get(key) {
        None => Ok(&[]),
        Some(Value::Array(a)) => Ok(a),
        Some(_) => Err(format!("`{key}` must be an array")),
    }
}

fn label_error(tool: &str, e: LabelError) -> ManifestError {
    match e {
        LabelError::Missing(key) => ManifestError::MissingLabel { tool: tool.into(), key },
        other => ManifestError::Invalid { tool: tool.into(), reason: other.to_string() },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticCode {
    PrivateCapableExternalSink,
    TrustedOutputFromLessTrustedTool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub tool: String,
    pub code: DiagnosticCode,
    pub message: String,
}

/// Warn about risky manifest shapes. Never fails.
pub fn lint_manifest<'a>(manifests: impl IntoIterator<Item = &'a ToolManifest>) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for t in manifests {
        if t.has_capability(Capability::ExternalWrite) {
            let risky: Vec<&str> = t
                .params
                .iter()
                .filter(|p| !p.accepts_max.confidentiality().is_public())
                .map(|p| p.name.as_str())
                .collect();
            if !risky.is_empty() {
                out.push(Diagnostic {
                    tool: t.tool_name.clone(),
                    code: DiagnosticCode::PrivateCapableExternalSink,
                    message: format!(
                        "private-capable external_write sink: params [{}] accept private data",
                        risky.join(", ")
                    ),
                });
            }
        }
        for o in &t.outputs {
            if o.label.trust() > t.trust {
                out.push(Diagnostic {
                    tool: t.tool_name.clone(),
                    code: DiagnosticCode::TrustedOutputFromLessTrustedTool,
                    message: format!(
                        "output `{}` is labeled {} but the tool is {}",
                        o.field,
                        o.label.trust().as_str(),
                        t.trust.as_str()
                    ),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const CALENDAR: &str = include_str!("../../../manifests/calendar.json");

    #[test]
    fn parses_shipped_calendar() {
        let tools = parse_manifest(CALENDAR).unwrap();
        let names: Vec<_> = tools.iter().map(|t| t.tool_name.as_str()).collect();
        assert_eq!(names, ["list_events", "update_event", "send_email"]);
        let send = &tools[2];
        assert!(send.has_capability(Capability::ExternalWrite));
        assert_eq!(send.param("to").unwrap().kind, ParamKind::Principal);
        assert!(tools[0].has_capability(Capability::ReadOnly));
        assert_eq!(tools[0].outputs[0].audience_refs(), ["attendees"]);
    }

    #[test]
    fn missing_capabilities_is_rejected() {
        let doc = r#"{"tools":[{"name":"send_email","trust":"trusted","params":[],"outputs":[]}]}"#;
        assert_eq!(
            parse_manifest(doc),
            Err(ManifestError::MissingLabel { tool: "send_email".into(), key: "capabilities".into() })
        );
    }

    #[test]
    fn missing_trust_and_output_confidentiality_are_rejected() {
        let doc = r#"{"tools":[{"name":"t","capabilities":["read_only"],"outputs":[]}]}"#;
        assert!(matches!(parse_manifest(doc), Err(ManifestError::MissingLabel { key, .. }) if key == "trust"));
        let doc = r#"{"tools":[{"name":"t","capabilities":["read_only"],"trust":"trusted",
            "outputs":[{"field":"x","label":{"trust":"trusted"}}]}]}"#;
        assert!(
            matches!(parse_manifest(doc), Err(ManifestError::MissingLabel { key, .. }) if key == "confidentiality")
        );
    }

    #[test]
    fn empty_tool_list() {
        assert_eq!(parse_manifest(r#"{"tools": []}"#).unwrap(), vec![]);
    }

    #[test]
    fn syntax_and_duplicates() {
        assert!(matches!(parse_manifest("{"), Err(ManifestError::Syntax(_))));
        assert!(matches!(parse_manifest("[]"), Err(ManifestError::Syntax(_))));
        let t = r#"{"name":"a","capabilities":["read_only"],"trust":"trusted"}"#;
        let doc = format!(r#"{{"tools":[{t},{t}]}}"#);
        assert_eq!(parse_manifest(&doc), Err(ManifestError::DuplicateTool("a".into())));
    }

    #[test]
    fn unknown_capability_is_invalid() {
        let doc = r#"{"tools":[{"name":"a","capabilities":["teleport"],"trust":"trusted"}]}"#;
        assert!(matches!(parse_manifest(doc), Err(ManifestError::Invalid { .. })));
    }

    #[test]
    fn instantiate_resolves_audience_refs() {
        let tools = parse_manifest(CALENDAR).unwrap();
        let out = &tools[0].outputs[0];
        let v = serde_json::json!({"title": "x", "attendees": ["user@corp.example", "colleague@corp.example"]});
        assert_eq!(out.instantiate(&v), LabelSet::private(["user@corp.example", "colleague@corp.example"]));
        assert_eq!(out.instantiate(&serde_json::json!({})), LabelSet::private(Vec::<Principal>::new()));
    }

    #[test]
    fn lint_calendar_has_one_warning() {
        let tools = parse_manifest(CALENDAR).unwrap();
        let d = lint_manifest(&tools);
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].tool, "send_email");
        assert_eq!(d[0].code, DiagnosticCode::PrivateCapableExternalSink);
    }

    #[test]
    fn lint_public_read_only_is_clean() {
        let doc = r#"{"tools":[{"name":"weather","capabilities":["read_only"],"trust":"trusted",
            "params":[{"name":"city","kind":"string","required":true,"accepts_max":{"confidentiality":"public","trust":"trusted"}}],
            "outputs":[{"field":"forecast","label":{"confidentiality":"public"}}]}]}"#;
        assert!(lint_manifest(&parse_manifest(doc).unwrap()).is_empty());
    }

    #[test]
    fn lint_untrusted_tool_with_trusted_output() {
        let doc = r#"{"tools":[{"name":"web","capabilities":["external_read"],"trust":"untrusted",
            "outputs":[{"field":"page","label":{"confidentiality":"public","trust":"trusted"}}]}]}"#;
        let tools = parse_manifest(doc).unwrap();
        let d = lint_manifest(&tools);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].code, DiagnosticCode::TrustedOutputFromLessTrustedTool);
        // the join at ingest caps the declared trust at the tool's trust
        assert_eq!(
            tools[0].outputs[0].label.join(&LabelSet::bottom().with_trust(tools[0].trust)).trust(),
            TrustLevel::Untrusted
        );
    }
}
