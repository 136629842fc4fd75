//! Runtime taint store for one agent session.
//!
//! Every value entering the agent context becomes a [`DataItem`] with a label
//! and derivation edges. Argument labels are computed from declared
//! provenance, or conservatively from the whole unmasked context when the
//! agent declares nothing.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::call::{CallFingerprint, ItemId, ToolCall};
use crate::label::{Confidentiality, LabelSet, Principal};
use crate::manifest::ToolManifest;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProvenanceError {
    #[error("result field `{0}` is not declared as an output of the tool")]
    UnknownField(String),
    #[error("tool result must be a JSON object")]
    MalformedResult,
    #[error("unknown item `{0}`")]
    UnknownId(ItemId),
    #[error("argument cites masked item `{0}`")]
    MaskedReference(ItemId),
    #[error("only the session owner may declassify")]
    NotOwner,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    ToolOutput { tool: String, field: String },
    UserInput,
    AgentLiteral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataItem {
    pub id: ItemId,
    pub source: Source,
    pub label: LabelSet,
    pub derived_from: BTreeSet<ItemId>,
    pub payload: Value,
}

/// Labels computed for the arguments of one proposed call.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArgumentLabels {
    /// Labels after applying matching declassification grants.
    pub effective: BTreeMap<String, LabelSet>,
    /// Labels as derived, ignoring grants.
    pub raw: BTreeMap<String, LabelSet>,
    /// Items that contributed to any argument.
    pub contributing: BTreeSet<ItemId>,
    /// Grants used (and therefore consumed) by this computation.
    pub consumed_grants: Vec<ItemId>,
}

impl ArgumentLabels {
    pub fn all_bottom(&self) -> bool {
        self.effective.values().all(LabelSet::is_bottom)
    }

    /// Join of every raw argument label.
    pub fn raw_join(&self) -> LabelSet {
        LabelSet::join_all(self.raw.values())
    }
}

#[derive(Debug, Clone)]
pub struct ContextStore {
    owner: Principal,
    items: BTreeMap<ItemId, DataItem>,
    order: Vec<ItemId>,
    masked: BTreeSet<ItemId>,
    grants: BTreeSet<(ItemId, CallFingerprint)>,
    next_id: u64,
}

impl ContextStore {
    pub fn new(owner: Principal) -> Self {
        ContextStore {
            owner,
            items: BTreeMap::new(),
            order: Vec::new(),
            masked: BTreeSet::new(),
            grants: BTreeSet::new(),
            next_id: 0,
        }
    }

    pub fn owner(&self) -> &Principal {
        &self.owner
    }

    pub fn get(&self, id: &ItemId) -> Option<&DataItem> {
        self.items.get(id)
    }

    /// Items in insertion order.
    pub fn items(&self) -> impl Iterator<Item = &DataItem> {
        self.order.iter().map(|id| &self.items[id])
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_masked(&self, id: &ItemId) -> bool {
        self.masked.contains(id)
    }

    pub fn grants(&self) -> impl Iterator<Item = &(ItemId, CallFingerprint)> {
        self.grants.iter()
    }

    fn fresh_id(&mut self) -> ItemId {
        self.next_id += 1;
        ItemId(format!("i{}", self.next_id))
    }

    fn insert(&mut self, source: Source, declared: LabelSet, derived_from: BTreeSet<ItemId>, payload: Value) -> ItemId {
        let parents = LabelSet::join_all(derived_from.iter().filter_map(|p| self.items.get(p)).map(|i| &i.label));
        let id = self.fresh_id();
        let item = DataItem { id: id.clone(), source, label: declared.join(&parents), derived_from, payload };
        self.items.insert(id.clone(), item);
        self.order.push(id.clone());
        id
    }

    /// Re-insert an item recorded elsewhere (audit replay). Keeps its id.
    pub fn restore(&mut self, item: DataItem) {
        if let Some(n) = item.id.0.strip_prefix('i').and_then(|n| n.parse::<u64>().ok()) {
            self.next_id = self.next_id.max(n);
        }
        self.order.push(item.id.clone());
        self.items.insert(item.id.clone(), item);
    }

    /// Items the arguments of `call` were derived from.
    pub fn call_parents(&self, call: &ToolCall) -> Result<BTreeSet<ItemId>, ProvenanceError> {
        let mut parents = BTreeSet::new();
        for arg in call.arguments.keys() {
            match call.provenance.for_argument(arg) {
                Some(ids) => {
                    for id in ids {
                        self.check_reference(id)?;
                        parents.insert(id.clone());
                    }
                }
                None => parents.extend(self.unmasked().map(|i| i.id.clone())),
            }
        }
        Ok(parents)
    }

    /// Record the outputs of an executed call: one item per top-level field,
    /// or one per element when the field holds an array.
    pub fn ingest_output(
        &mut self,
        call: &ToolCall,
        result: &Value,
        manifest: &ToolManifest,
    ) -> Result<Vec<ItemId>, ProvenanceError> {
        let fields = match result {
            Value::Object(m) => m,
            Value::Null => return Ok(Vec::new()),
            _ => return Err(ProvenanceError::MalformedResult),
        };
        for k in fields.keys() {
            if manifest.output(k).is_none() {
                return Err(ProvenanceError::UnknownField(k.clone()));
            }
        }
        let parents = self.call_parents(call)?;
        let tool_trust = LabelSet::bottom().with_trust(manifest.trust);
        let mut ids = Vec::new();
        for (field, value) in fields {
            let spec = manifest.output(field).expect("checked above");
            let values: Vec<&Value> = match value {
                Value::Array(items) => items.iter().collect(),
                v => vec![v],
            };
            for v in values {
                let label = spec.instantiate(v).join(&tool_trust);
                let source = Source::ToolOutput { tool: manifest.tool_name.clone(), field: field.clone() };
                ids.push(self.insert(source, label, parents.clone(), v.clone()));
            }
        }
        Ok(ids)
    }

    pub fn ingest_user_input(&mut self, payload: Value, label: LabelSet) -> ItemId {
        self.insert(Source::UserInput, label, BTreeSet::new(), payload)
    }

    fn check_reference(&self, id: &ItemId) -> Result<&DataItem, ProvenanceError> {
        let item = self.items.get(id).ok_or_else(|| ProvenanceError::UnknownId(id.clone()))?;
        if self.masked.contains(id) {
            return Err(ProvenanceError::MaskedReference(id.clone()));
        }
        Ok(item)
    }

    fn unmasked(&self) -> impl Iterator<Item = &DataItem> {
        self.items().filter(|i| !self.masked.contains(&i.id))
    }

    /// Label of an argument: join over the cited items, or over the whole
    /// unmasked context when `provenance` is `None`.
    pub fn effective_label(&self, provenance: Option<&BTreeSet<ItemId>>) -> Result<LabelSet, ProvenanceError> {
        match provenance {
            Some(ids) => {
                let mut acc = LabelSet::bottom();
                for id in ids {
                    acc = acc.join(&self.check_reference(id)?.label);
                }
                Ok(acc)
            }
            None => Ok(LabelSet::join_all(self.unmasked().map(|i| &i.label))),
        }
    }

    /// Compute every argument label of `call`, applying and consuming any
    /// grant registered for `fingerprint`.
    pub fn argument_labels(
        &mut self,
        call: &ToolCall,
        fingerprint: &CallFingerprint,
    ) -> Result<ArgumentLabels, ProvenanceError> {
        let mut out = ArgumentLabels::default();
        let mut used = BTreeSet::new();
        for arg in call.arguments.keys() {
            let sources: Vec<&DataItem> = match call.provenance.for_argument(arg) {
                Some(ids) => ids.iter().map(|id| self.check_reference(id)).collect::<Result<_, _>>()?,
                None => self.unmasked().collect(),
            };
            let mut raw = LabelSet::bottom();
            let mut eff = LabelSet::bottom();
            for item in sources {
                raw = raw.join(&item.label);
                out.contributing.insert(item.id.clone());
                let key = (item.id.clone(), fingerprint.clone());
                if self.grants.contains(&key) {
                    used.insert(key);
                    eff = eff.join(&item.label.clone().with_confidentiality(Confidentiality::Everyone));
                } else {
                    eff = eff.join(&item.label);
                }
            }
            out.raw.insert(arg.clone(), raw);
            out.effective.insert(arg.clone(), eff);
        }
        for key in used {
            self.grants.remove(&key);
            out.consumed_grants.push(key.0);
        }
        Ok(out)
    }

    pub fn mask(&mut self, ids: &BTreeSet<ItemId>) -> Result<(), ProvenanceError> {
        if let Some(missing) = ids.iter().find(|id| !self.items.contains_key(id)) {
            return Err(ProvenanceError::UnknownId(missing.clone()));
        }
        self.masked.extend(ids.iter().cloned());
        Ok(())
    }

    /// Register a single-use grant letting `id` be treated as public for the
    /// next call matching `fingerprint`.
    pub fn declassify(
        &mut self,
        id: &ItemId,
        fingerprint: CallFingerprint,
        authorizer: &Principal,
    ) -> Result<(), ProvenanceError> {
        if !self.items.contains_key(id) {
            return Err(ProvenanceError::UnknownId(id.clone()));
        }
        if authorizer != &self.owner {
            return Err(ProvenanceError::NotOwner);
        }
        self.grants.insert((id.clone(), fingerprint));
        Ok(())
    }

    /// Drop a grant without using it. Returns whether it existed.
    pub fn consume_grant(&mut self, id: &ItemId, fingerprint: &CallFingerprint) -> bool {
        self.grants.remove(&(id.clone(), fingerprint.clone()))
    }

    /// Every item's label is at least the join of its parents' labels.
    pub fn check_monotone(&self) -> bool {
        self.items.values().all(|item| {
            let parents =
                LabelSet::join_all(item.derived_from.iter().filter_map(|p| self.items.get(p)).map(|i| &i.label));
            parents.leq(&item.label)
        })
    }

    /// Derivation edges form a DAG.
    pub fn check_acyclic(&self) -> bool {
        // Kahn's algorithm over parent edges.
        let mut indegree: BTreeMap<&ItemId, usize> =
            self.items.values().map(|i| (&i.id, i.derived_from.len())).collect();
        let mut children: BTreeMap<&ItemId, Vec<&ItemId>> = BTreeMap::new();
        for item in self.items.values() {
            for p in &item.derived_from {
                if !self.items.contains_key(p) {
                    return false;
                }
                children.entry(p).or_default().push(&item.id);
            }
        }
        let mut ready: Vec<&ItemId> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
        let mut seen = 0;
        while let Some(n) = ready.pop() {
            seen += 1;
            for c in children.get(n).into_iter().flatten() {
                let d = indegree.get_mut(c).expect("child is an item");
                *d -= 1;
                if *d == 0 {
                    ready.push(c);
                }
            }
        }
        seen == self.items.len()
    }
}
