//! Label-enforcing gateway for tool-using LLM agents.
//!
//! Every tool call an agent proposes is intercepted, its arguments are
//! labeled from the taint store, and a four-tier policy (blocklist, mustlist,
//! allowlist, confirmation) decides whether it runs. A bounded model checker
//! over the same policy engine proves hazards such as private data reaching
//! an external sink unreachable, or returns a shortest counterexample.

pub mod call;
pub mod cli;
pub mod gateway;
pub mod harness;
pub mod label;
pub mod manifest;
pub mod obligation;
pub mod policy;
pub mod provenance;
pub mod server;
pub mod verifier;

pub use call::{CallFingerprint, ExecutedCall, ItemId, Provenance, ToolCall};
pub use label::{Capability, Confidentiality, LabelSet, Principal, Ternary, TrustLevel};
pub use manifest::{lint_manifest, parse_manifest, ManifestSet, ToolManifest};
pub use obligation::{ObligationSpec, ObligationState};
pub use policy::{evaluate, parse_policy, Decision, PolicySet, Verdict};
pub use provenance::{ContextStore, DataItem};
