//! Tool-call requests as seen by the gateway.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::label::Principal;
use crate::manifest::ToolManifest;

/// Identifier of a [`crate::provenance::DataItem`] in a context store.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub String);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ItemId {
    fn from(s: &str) -> Self {
        ItemId(s.to_owned())
    }
}

/// Which stored items an argument was derived from, as declared by the agent.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Provenance {
    /// Nothing declared: every argument is tainted by the whole context.
    #[default]
    Undeclared,
    /// The same item set for every argument.
    All(BTreeSet<ItemId>),
    /// Per-argument item sets; arguments not listed are undeclared.
    PerArgument(BTreeMap<String, BTreeSet<ItemId>>),
}

impl Provenance {
    pub fn for_argument(&self, arg: &str) -> Option<&BTreeSet<ItemId>> {
        match self {
            Provenance::Undeclared => None,
            Provenance::All(ids) => Some(ids),
            Provenance::PerArgument(map) => map.get(arg),
        }
    }

    pub fn is_undeclared(&self) -> bool {
        matches!(self, Provenance::Undeclared)
    }
}

/// A proposed call as submitted by the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Provenance::is_undeclared")]
    pub provenance: Provenance,
}

impl ToolCall {
    pub fn new(tool: impl Into<String>, arguments: Value) -> Self {
        let arguments = match arguments {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            other => {
                let mut m = Map::new();
                m.insert("value".into(), other);
                m
            }
        };
        ToolCall { tool: tool.into(), arguments, provenance: Provenance::Undeclared }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// `(tool, recipients, sha256 of the canonical argument JSON)`.
    pub fn fingerprint(&self, manifest: &ToolManifest) -> CallFingerprint {
        let recipients: Vec<String> =
            manifest.recipients(&self.arguments).iter().map(|p| p.canonical().to_owned()).collect();
        // serde_json maps are key-sorted, so this serialization is canonical.
        let canonical = serde_json::to_vec(&self.arguments).expect("json map serializes");
        let digest = Sha256::digest(&canonical);
        CallFingerprint(format!("{}|{}|{}", self.tool, recipients.join(","), hex::encode(digest)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CallFingerprint(pub String);

impl fmt::Display for CallFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A call after execution, as fed to the obligation monitor.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutedCall {
    pub call_id: u64,
    pub tool: String,
    pub arguments: Map<String, Value>,
    pub recipients: Vec<Principal>,
    pub result: Value,
    /// The principal on whose behalf the agent acts (session owner).
    pub actor: Principal,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::parse_manifest;
    use serde_json::json;

    #[test]
    fn fingerprint_is_stable_and_argument_sensitive() {
        let tools = parse_manifest(include_str!("../../../manifests/calendar.json")).unwrap();
        let send = &tools[2];
        let a = ToolCall::new("send_email", json!({"to": "Bob@X", "subject": "s", "body": "b"}));
        let b = ToolCall::new("send_email", json!({"body": "b", "subject": "s", "to": "Bob@X"}));
        let c = ToolCall::new("send_email", json!({"to": "Bob@X", "subject": "s", "body": "c"}));
        assert_eq!(a.fingerprint(send), b.fingerprint(send));
        assert_ne!(a.fingerprint(send), c.fingerprint(send));
        assert!(a.fingerprint(send).0.starts_with("send_email|bob@x|"));
    }

    #[test]
    fn provenance_wire_forms() {
        let p: Provenance = serde_json::from_value(json!(["i1", "i2"])).unwrap();
        assert_eq!(p.for_argument("x").unwrap().len(), 2);
        let p: Provenance = serde_json::from_value(json!({"body": ["i1"]})).unwrap();
        assert!(p.for_argument("to").is_none());
        assert_eq!(p.for_argument("body").unwrap().len(), 1);
    }
}
