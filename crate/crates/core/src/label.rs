//! Label vocabulary and the restrictiveness lattice used for every flow decision.
//!
//! A [`LabelSet`] combines three components, each ordered by restrictiveness:
//!
//! - confidentiality, as a reader audience: `Everyone` is the bottom, smaller
//!   audiences are stricter, and join intersects audiences;
//! - trust, where `untrusted` is the top of the join (derived data is only as
//!   trustworthy as its least trustworthy input);
//! - open-ended ternary tags (`yes` / `unsure` / `no`) where a missing key
//!   means `no`.
//!
//! Everything here is an immutable value type.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

pub const KEY_CONFIDENTIALITY: &str = "confidentiality";
pub const KEY_TRUST: &str = "trust";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("missing mandatory label `{0}`")]
    Missing(String),
    #[error("invalid value for label `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("principal identity must be non-empty")]
    EmptyPrincipal,
}

/// An identity that can read data, e.g. an email address.
///
/// Equality, ordering and hashing are case-insensitive over the full string;
/// the original spelling is kept for display and serialization.
#[derive(Clone)]
pub struct Principal {
    id: String,
    folded: String,
}

impl Principal {
    pub fn new(id: impl Into<String>) -> Result<Self, LabelError> {
        let id = id.into();
        if id.is_empty() {
            return Err(LabelError::EmptyPrincipal);
        }
        let folded = id.to_lowercase();
        Ok(Principal { id, folded })
    }

    pub fn as_str(&self) -> &str {
        &self.id
    }

    /// Lower-cased identity, used for comparisons.
    pub fn canonical(&self) -> &str {
        &self.folded
    }

    /// The part after the last `@`, if any.
    pub fn domain(&self) -> Option<&str> {
        self.folded.rsplit_once('@').map(|(_, d)| d)
    }
}

impl PartialEq for Principal {
    fn eq(&self, other: &Self) -> bool {
        self.folded == other.folded
    }
}

impl Eq for Principal {}

impl Hash for Principal {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.folded.hash(state)
    }
}

impl PartialOrd for Principal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Principal {
    fn cmp(&self, other: &Self) -> Ordering {
        self.folded.cmp(&other.folded)
    }
}

impl fmt::Debug for Principal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Principal({})", self.id)
    }
}

impl fmt::Display for Principal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id)
    }
}

impl FromStr for Principal {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Principal::new(s)
    }
}

impl Serialize for Principal {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.id)
    }
}

impl<'de> Deserialize<'de> for Principal {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Principal::new(s).map_err(D::Error::custom)
    }
}

/// Who may read a value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Confidentiality {
    /// Public: readable by every principal.
    Everyone,
    /// Private to exactly this audience. May be empty.
    Audience(BTreeSet<Principal>),
}

impl Confidentiality {
    pub fn private<I, P>(members: I) -> Self
    where
        I: IntoIterator<Item = P>,
        P: Into<Principal>,
    {
        Confidentiality::Audience(members.into_iter().map(Into::into).collect())
    }

    pub fn is_public(&self) -> bool {
        matches!(self, Confidentiality::Everyone)
    }

    pub fn admits(&self, reader: &Principal) -> bool {
        match self {
            Confidentiality::Everyone => true,
            Confidentiality::Audience(set) => set.contains(reader),
        }
    }

    pub fn join(&self, other: &Self) -> Self {
        match (self, other) {
            (Confidentiality::Everyone, x) | (x, Confidentiality::Everyone) => x.clone(),
            (Confidentiality::Audience(a), Confidentiality::Audience(b)) => {
                Confidentiality::Audience(a.intersection(b).cloned().collect())
            }
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Confidentiality::Everyone => Value::String("public".into()),
            Confidentiality::Audience(set) => {
                let audience: Vec<Value> = set.iter().map(|p| Value::String(p.as_str().to_owned())).collect();
                serde_json::json!({ "private": { "audience": audience } })
            }
        }
    }

    fn from_json(v: &Value) -> Result<Self, LabelError> {
        let invalid = |reason: &str| LabelError::Invalid { key: KEY_CONFIDENTIALITY.into(), reason: reason.into() };
        match v {
            Value::String(s) if s == "public" => Ok(Confidentiality::Everyone),
            Value::String(s) if s == "private" => Err(invalid("`private` requires an explicit audience")),
            Value::Object(obj) => {
                let inner = obj
                    .get("private")
                    .and_then(Value::as_object)
                    .ok_or_else(|| invalid("expected {\"private\": {\"audience\": [...]}}"))?;
                let list = inner
                    .get("audience")
                    .and_then(Value::as_array)
                    .ok_or_else(|| invalid("`private` requires an `audience` array"))?;
                let mut set = BTreeSet::new();
                for item in list {
                    let s = item.as_str().ok_or_else(|| invalid("audience entries must be strings"))?;
                    set.insert(Principal::new(s).map_err(|_| invalid("empty principal in audience"))?);
                }
                Ok(Confidentiality::Audience(set))
            }
            _ => Err(invalid("expected \"public\" or a private audience object")),
        }
    }
}

/// Trust in the provenance of a value. Ordered from least to most trusted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrustLevel {
    Untrusted,
    Unsure,
    Trusted,
}

impl TrustLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            TrustLevel::Untrusted => "untrusted",
            TrustLevel::Unsure => "unsure",
            TrustLevel::Trusted => "trusted",
        }
    }
}

impl FromStr for TrustLevel {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trusted" => Ok(TrustLevel::Trusted),
            "unsure" => Ok(TrustLevel::Unsure),
            "untrusted" => Ok(TrustLevel::Untrusted),
            other => {
                Err(LabelError::Invalid { key: KEY_TRUST.into(), reason: format!("unknown trust level `{other}`") })
            }
        }
    }
}

/// A three-valued tag such as `is_PII`. Ordered by restrictiveness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ternary {
    No,
    Unsure,
    Yes,
}

impl Ternary {
    pub fn as_str(self) -> &'static str {
        match self {
            Ternary::No => "no",
            Ternary::Unsure => "unsure",
            Ternary::Yes => "yes",
        }
    }
}

impl FromStr for Ternary {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no" => Ok(Ternary::No),
            "unsure" => Ok(Ternary::Unsure),
            "yes" => Ok(Ternary::Yes),
            other => Err(format!("expected yes/no/unsure, got `{other}`")),
        }
    }
}

/// What a tool is able to do. `External*` variants cross the system boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    ReadOnly,
    WriteOnly,
    ReadWrite,
    Execute,
    ExternalWrite,
    ExternalRead,
}

impl Capability {
    pub const ALL: [Capability; 6] = [
        Capability::ReadOnly,
        Capability::WriteOnly,
        Capability::ReadWrite,
        Capability::Execute,
        Capability::ExternalWrite,
        Capability::ExternalRead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Capability::ReadOnly => "read_only",
            Capability::WriteOnly => "write_only",
            Capability::ReadWrite => "read_write",
            Capability::Execute => "execute",
            Capability::ExternalWrite => "external_write",
            Capability::ExternalRead => "external_read",
        }
    }
}

impl FromStr for Capability {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Capability::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| format!("unknown capability `{s}`"))
    }
}

/// The full label attached to a value.
///
/// Ternary tags equal to `no` are never stored, so structural equality is
/// semantic equality.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSet {
    confidentiality: Confidentiality,
    trust: TrustLevel,
    tags: BTreeMap<String, Ternary>,
}

impl Default for LabelSet {
    fn default() -> Self {
        LabelSet::bottom()
    }
}

impl LabelSet {
    /// Public, trusted, no tags: flows anywhere.
    pub fn bottom() -> Self {
        LabelSet { confidentiality: Confidentiality::Everyone, trust: TrustLevel::Trusted, tags: BTreeMap::new() }
    }

    pub fn new(confidentiality: Confidentiality, trust: TrustLevel) -> Self {
        LabelSet { confidentiality, trust, tags: BTreeMap::new() }
    }

    pub fn public() -> Self {
        Self::bottom()
    }

    pub fn private<I, P>(audience: I) -> Self
    where
        I: IntoIterator<Item = P>,
        P: Into<Principal>,
    {
        LabelSet::new(Confidentiality::private(audience), TrustLevel::Trusted)
    }

    pub fn with_trust(mut self, trust: TrustLevel) -> Self {
        self.trust = trust;
        self
    }

    pub fn with_confidentiality(mut self, c: Confidentiality) -> Self {
        self.confidentiality = c;
        self
    }

    pub fn with_tag(mut self, key: impl Into<String>, value: Ternary) -> Self {
        let key = key.into();
        if value == Ternary::No {
            self.tags.remove(&key);
        } else {
            self.tags.insert(key, value);
        }
        self
    }

    pub fn confidentiality(&self) -> &Confidentiality {
        &self.confidentiality
    }

    pub fn trust(&self) -> TrustLevel {
        self.trust
    }

    pub fn tag(&self, key: &str) -> Ternary {
        self.tags.get(key).copied().unwrap_or(Ternary::No)
    }

    /// Tags whose value is above `no`.
    pub fn tags(&self) -> impl Iterator<Item = (&str, Ternary)> {
        self.tags.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn is_bottom(&self) -> bool {
        *self == LabelSet::bottom()
    }

    /// Least upper bound in restrictiveness.
    pub fn join(&self, other: &LabelSet) -> LabelSet {
        let mut tags = self.tags.clone();
        for (k, v) in &other.tags {
            let e = tags.entry(k.clone()).or_insert(Ternary::No);
            *e = (*e).max(*v);
        }
        LabelSet {
            confidentiality: self.confidentiality.join(&other.confidentiality),
            trust: self.trust.min(other.trust),
            tags,
        }
    }

    /// Join of any number of labels; bottom for none.
    pub fn join_all<'a>(labels: impl IntoIterator<Item = &'a LabelSet>) -> LabelSet {
        labels.into_iter().fold(LabelSet::bottom(), |acc, l| acc.join(l))
    }

    /// `self` is at most as restrictive as `other`.
    pub fn leq(&self, other: &LabelSet) -> bool {
        self.join(other) == *other
    }

    /// May `reader` see data carrying this label?
    pub fn flows_to(&self, reader: &Principal) -> bool {
        self.confidentiality.admits(reader)
    }

    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        map.insert(KEY_CONFIDENTIALITY.into(), self.confidentiality.to_json());
        map.insert(KEY_TRUST.into(), Value::String(self.trust.as_str().into()));
        for (k, v) in &self.tags {
            map.insert(k.clone(), Value::String(v.as_str().into()));
        }
        Value::Object(map)
    }

    /// Parse the key-value tag form. Both `confidentiality` and `trust` are
    /// mandatory; every other key must be a ternary tag.
    pub fn from_json(v: &Value) -> Result<LabelSet, LabelError> {
        let obj = v.as_object().ok_or_else(|| LabelError::Invalid {
            key: "label".into(),
            reason: "expected an object of key-value tags".into(),
        })?;
        let confidentiality = Confidentiality::from_json(
            obj.get(KEY_CONFIDENTIALITY).ok_or_else(|| LabelError::Missing(KEY_CONFIDENTIALITY.into()))?,
        )?;
        let trust = obj
            .get(KEY_TRUST)
            .ok_or_else(|| LabelError::Missing(KEY_TRUST.into()))?
            .as_str()
            .ok_or_else(|| LabelError::Invalid { key: KEY_TRUST.into(), reason: "expected a string".into() })?
            .parse()?;
        let mut label = LabelSet::new(confidentiality, trust);
        for (k, v) in obj {
            if k == KEY_CONFIDENTIALITY || k == KEY_TRUST {
                continue;
            }
            let t = v
                .as_str()
                .ok_or_else(|| LabelError::Invalid { key: k.clone(), reason: "expected a string".into() })?
                .parse::<Ternary>()
                .map_err(|reason| LabelError::Invalid { key: k.clone(), reason })?;
            label = label.with_tag(k.clone(), t);
        }
        Ok(label)
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.confidentiality {
            Confidentiality::Everyone => f.write_str("public")?,
            Confidentiality::Audience(set) => {
                f.write_str("private{")?;
                for (i, p) in set.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    f.write_str(p.as_str())?;
                }
                f.write_str("}")?;
            }
        }
        write!(f, "/{}", self.trust.as_str())?;
        for (k, v) in &self.tags {
            write!(f, "/{k}={}", v.as_str())?;
        }
        Ok(())
    }
}

impl Serialize for LabelSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let v = self.to_json();
        let obj = v.as_object().expect("label serializes to an object");
        let mut m = s.serialize_map(Some(obj.len()))?;
        for (k, v) in obj {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        LabelSet::from_json(&v).map_err(D::Error::custom)
    }
}

impl From<&str> for Principal {
    /// Panics on an empty string; meant for literals.
    fn from(s: &str) -> Self {
        Principal::new(s).expect("principal literal must be non-empty")
    }
}
