//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 operation failure (or an unsafe verdict), 2
//! usage error (and, for `verify`, any error).

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use crate::gateway::{backend, replay, BackendFactory, Gateway, GatewayConfig};
use crate::harness::{self, MockFleet, ScenarioOptions};
use crate::label::Principal;
use crate::manifest::{lint_manifest, parse_manifest, ManifestSet};
use crate::policy::{parse_policy, PolicySet};
use crate::server;
use crate::verifier::{self, ConfirmationMode, Goal, Hazard, VerifyConfig};

#[derive(Parser, Debug)]
#[command(name = "labelgate", version, about = "Label-enforcing gateway for tool-using agents")]
pub struct Cli {
    /// Machine-readable JSON output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the gateway (JSON-RPC over HTTP or stdio, plus the console API).
    Serve(ServeArgs),
    /// Bounded check that hazards are unreachable under a policy.
    Verify(VerifyArgs),
    /// Lint a tool manifest.
    Lint { manifest: PathBuf },
    /// Re-evaluate an audit log and compare every decision.
    Replay { log: PathBuf },
    /// Run a shipped scripted scenario.
    Scenario {
        name: String,
        #[arg(long, default_value = "none")]
        policy: String,
        #[arg(long)]
        audit_dir: Option<PathBuf>,
    },
    /// Parse a policy and cross-check it against a manifest.
    PolicyCheck {
        policy: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Default)]
pub struct ServeArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub listen: Option<SocketAddr>,
    #[arg(long)]
    pub timeout_secs: Option<i64>,
    #[arg(long = "internal-domain")]
    pub internal_domains: Vec<String>,
    #[arg(long)]
    pub owner: Option<String>,
    #[arg(long)]
    pub audit_dir: Option<PathBuf>,
    /// Bearer token required on console routes.
    #[arg(long)]
    pub token: Option<String>,
    /// Tool server to spawn per session (speaks JSON-RPC on stdio);
    /// without it every session gets the mock calendar workspace.
    #[arg(long)]
    pub backend_cmd: Option<String>,
    #[arg(long = "backend-arg", allow_hyphen_values = true)]
    pub backend_args: Vec<String>,
    /// Serve one agent session on stdin/stdout.
    #[arg(long)]
    pub stdio: bool,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Policy file, or the name of a shipped variant.
    #[arg(long, default_value = "none")]
    pub policy: String,
    #[arg(long = "hazard", default_value = "private_leak")]
    pub hazards: Vec<String>,
    #[arg(long, default_value_t = verifier::DEFAULT_BOUND)]
    pub bound: usize,
    #[arg(long, default_value_t = verifier::DEFAULT_UNIVERSE)]
    pub universe: usize,
    #[arg(long, default_value_t = verifier::DEFAULT_STATE_CAP)]
    pub state_cap: usize,
    /// Assume every confirmation is denied.
    #[arg(long)]
    pub deny_only: bool,
    #[arg(long = "internal-domain")]
    pub internal_domains: Vec<String>,
    /// Replay an unsafe verdict's counterexample through the gateway.
    #[arg(long)]
    pub replay: bool,
    /// Also search for a hazard-free trace through these tools, in order
    /// (comma separated).
    #[arg(long)]
    pub witness: Option<String>,
}

/// Parse `args` and run. Output goes to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return e.exit_code();
        }
    };
    let json = cli.json;
    let result = match cli.command {
        Command::Serve(a) => serve(a, json, out),
        Command::Verify(a) => return verify(a, json, out, err),
        Command::Lint { manifest } => lint(&manifest, json, out),
        Command::Replay { log } => replay_cmd(&log, json, out),
        Command::Scenario { name, policy, audit_dir } => scenario(&name, &policy, audit_dir, json, out),
        Command::PolicyCheck { policy, manifest } => policy_check(&policy, manifest.as_deref(), json, out),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            if json {
                let _ = writeln!(out, "{}", json!({"error": msg}));
            } else {
                let _ = writeln!(err, "error: {msg}");
            }
            1
        }
    }
}

type CmdResult = Result<i32, String>;

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_manifests(path: Option<&Path>) -> Result<ManifestSet, String> {
    match path {
        None => Ok(harness::calendar_manifests()),
        Some(p) => ManifestSet::parse(&read(p)?).map_err(|e| format!("{}: {e}", p.display())),
    }
}

/// A policy file, or a shipped variant when no such file exists.
fn load_policy(spec: &str, manifests: &ManifestSet) -> Result<PolicySet, String> {
    let path = Path::new(spec);
    if path.exists() {
        return parse_policy(&read(path)?, manifests).map_err(|e| format!("{spec}: {e}"));
    }
    let (_, text) = harness::POLICY_VARIANTS
        .iter()
        .find(|(n, _)| *n == spec)
        .ok_or_else(|| format!("{spec}: no such file or shipped policy"))?;
    parse_policy(text, manifests).map_err(|e| format!("{spec}: {e}"))
}

fn emit(out: &mut dyn Write, text: impl std::fmt::Display) -> Result<(), String> {
    writeln!(out, "{text}").map_err(|e| e.to_string())
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).unwrap_or_default()
}

fn lint(path: &Path, json: bool, out: &mut dyn Write) -> CmdResult {
    let tools = parse_manifest(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))?;
    let diags = lint_manifest(&tools);
    if json {
        emit(out, pretty(&json!({"tools": tools.len(), "diagnostics": diags})))?;
    } else {
        for d in &diags {
            emit(out, format_args!("warning[{:?}] {}: {}", d.code, d.tool, d.message))?;
        }
        emit(out, format_args!("{} tool(s), {} warning(s)", tools.len(), diags.len()))?;
    }
    Ok(0)
}

fn policy_check(policy: &Path, manifest: Option<&Path>, json: bool, out: &mut dyn Write) -> CmdResult {
    let manifests = load_manifests(manifest)?;
    let set = parse_policy(&read(policy)?, &manifests).map_err(|e| format!("{}: {e}", policy.display()))?;
    if json {
        emit(
            out,
            pretty(&json!({"ok": true, "rules": set.rules().len(), "obligations": set.active_obligations().len()})),
        )?;
    } else {
        emit(
            out,
            format_args!("ok: {} rule(s), {} active obligation(s)", set.rules().len(), set.active_obligations().len()),
        )?;
    }
    Ok(0)
}

fn replay_cmd(path: &Path, json: bool, out: &mut dyn Write) -> CmdResult {
    let report = replay(&read(path)?).map_err(|e| e.to_string())?;
    if json {
        emit(out, pretty(&report))?;
    } else {
        for d in &report.decisions {
            emit(
                out,
                format_args!(
                    "seq {:>4}  call {:>3}  {}",
                    d.seq,
                    d.call_id,
                    serde_json::to_string(&d.decision).unwrap_or_default()
                ),
            )?;
        }
        emit(out, format_args!("{} event(s), {} decision(s), 0 mismatches", report.events, report.decisions.len()))?;
    }
    Ok(0)
}

fn scenario(name: &str, policy: &str, audit_dir: Option<PathBuf>, json: bool, out: &mut dyn Write) -> CmdResult {
    let report = harness::run_scenario(name, policy, &ScenarioOptions { audit_dir }).map_err(|e| e.to_string())?;
    if json {
        emit(out, pretty(&report))?;
        return Ok(0);
    }
    emit(out, format_args!("scenario {} under policy {}", report.scenario, report.policy))?;
    for d in &report.decisions {
        emit(
            out,
            format_args!(
                "  call {} {:<12} {}",
                d.call_id,
                d.tool,
                serde_json::to_string(&d.decision.verdict).unwrap_or_default()
            ),
        )?;
    }
    emit(out, format_args!("emails sent: {}", report.emails_sent.len()))?;
    for e in &report.emails_sent {
        emit(out, format_args!("  to {}: {} / {}", e.to, e.subject, e.body))?;
    }
    emit(out, format_args!("leaked: {}", report.leaked))?;
    emit(out, format_args!("obligation violations: {}", report.violations.len()))?;
    if let Some(p) = &report.audit_log {
        emit(out, format_args!("audit log: {}", p.display()))?;
    }
    Ok(0)
}

fn verify(a: VerifyArgs, json: bool, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match verify_inner(a, json, out) {
        Ok(code) => code,
        Err(msg) => {
            if json {
                let _ = writeln!(out, "{}", json!({"verdict": "error", "error": msg}));
            } else {
                let _ = writeln!(err, "error: {msg}");
            }
            2
        }
    }
}

fn verify_inner(a: VerifyArgs, json: bool, out: &mut dyn Write) -> CmdResult {
    let manifests = load_manifests(a.manifest.as_deref())?;
    let policy = load_policy(&a.policy, &manifests)?;
    let hazards =
        a.hazards.iter().map(|h| h.parse::<Hazard>()).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
    let mut config = VerifyConfig::default().with_bound(a.bound).with_universe(a.universe);
    config.state_cap = a.state_cap;
    if a.deny_only {
        config.confirmations = ConfirmationMode::DenyOnly;
    }
    if !a.internal_domains.is_empty() {
        config.internal_domains = a.internal_domains.clone();
    }
    let result = verifier::check(&manifests, &policy, &hazards, &config).map_err(|e| e.to_string())?;
    let mut report = result.report();
    if a.replay && !result.is_safe() {
        let confirmed =
            verifier::replay_counterexample(&result, &manifests, &policy, &config).map_err(|e| e.to_string())?;
        report["replay"] = json!({"confirmed": true, "hazard": confirmed.hazard, "leaks": confirmed.run.leaks});
    }
    if let Some(goal) = &a.witness {
        let goal = Goal {
            sequence: goal.split(',').map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect(),
            ..Goal::update_then_notify()
        };
        let w = verifier::witness(&manifests, &policy, &goal, &config).map_err(|e| e.to_string())?;
        report["witness"] = serde_json::to_value(&w).unwrap_or_default();
    }
    if json {
        emit(out, pretty(&report))?;
    } else {
        match result.counterexample() {
            None => {
                emit(out, format_args!("SAFE within bound {} ({} states explored)", a.bound, result.states_explored()))?
            }
            Some(cex) => {
                emit(
                    out,
                    format_args!(
                        "UNSAFE: {} reachable in {} step(s) ({} states explored)",
                        cex.hazard,
                        cex.steps.len(),
                        result.states_explored()
                    ),
                )?;
                for (i, s) in cex.steps.iter().enumerate() {
                    let to: Vec<&str> = s.recipients.iter().map(|p| p.as_str()).collect();
                    emit(
                        out,
                        format_args!(
                            "  {}. {}{} args={} {}{}",
                            i + 1,
                            s.tool,
                            if to.is_empty() { String::new() } else { format!(" to {}", to.join(",")) },
                            s.arg_label.to_json(),
                            serde_json::to_string(&s.decision.verdict).unwrap_or_default(),
                            if s.approved { " (approved)" } else { "" }
                        ),
                    )?;
                }
                if report.get("replay").is_some() {
                    emit(out, "counterexample confirmed against the gateway")?;
                }
            }
        }
        if let Some(w) = report.get("witness") {
            match w.as_array() {
                Some(steps) => {
                    let tools: Vec<&str> = steps.iter().filter_map(|s| s["tool"].as_str()).collect();
                    emit(out, format_args!("witness: {}", tools.join(" -> ")))?;
                }
                None => emit(out, "witness: none within bound")?,
            }
        }
    }
    Ok(if result.is_safe() { 0 } else { 1 })
}

/// Serve settings as read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ServeFile {
    manifest: Option<PathBuf>,
    policy: Option<String>,
    listen: Option<SocketAddr>,
    timeout_secs: Option<i64>,
    #[serde(default)]
    internal_domains: Vec<String>,
    owner: Option<String>,
    audit_dir: Option<PathBuf>,
    token: Option<String>,
    backend_cmd: Option<String>,
    #[serde(default)]
    backend_args: Vec<String>,
}

fn serve(a: ServeArgs, json: bool, out: &mut dyn Write) -> CmdResult {
    let file: ServeFile = match &a.config {
        Some(p) => serde_json::from_str(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))?,
        None => ServeFile::default(),
    };
    let manifests = load_manifests(a.manifest.as_deref().or(file.manifest.as_deref()))?;
    let policy = load_policy(a.policy.as_deref().or(file.policy.as_deref()).unwrap_or("none"), &manifests)?;
    let owner = a.owner.or(file.owner).unwrap_or_else(|| harness::OWNER.to_owned());
    let owner = Principal::new(owner).map_err(|e| e.to_string())?;
    let mut internal = if a.internal_domains.is_empty() { file.internal_domains } else { a.internal_domains };
    if internal.is_empty() {
        internal.extend(owner.domain().map(str::to_owned));
    }
    let mut config = GatewayConfig {
        internal_domains: internal,
        audit_dir: a.audit_dir.or(file.audit_dir),
        ..GatewayConfig::default()
    };
    if let Some(t) = a.timeout_secs.or(file.timeout_secs) {
        config.confirmation_timeout = chrono::Duration::seconds(t);
    }
    let backends: BackendFactory = match a.backend_cmd.or(file.backend_cmd) {
        None => MockFleet::default().factory(),
        Some(cmd) => {
            let args = if a.backend_args.is_empty() { file.backend_args } else { a.backend_args };
            Arc::new(move |_sid: &str| match backend::StdioToolServer::spawn(&cmd, &args) {
                Ok(s) => Arc::new(s) as Arc<dyn backend::ToolBackend>,
                Err(e) => Arc::new(Unavailable(e.to_string())),
            })
        }
    };
    let gateway = Arc::new(Gateway::new(manifests, policy, config, backends));
    let state = server::AppState::new(gateway, owner, a.token.or(file.token));
    let listen = a.listen.or(file.listen).unwrap_or_else(|| "127.0.0.1:8787".parse().expect("valid address"));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| e.to_string())?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(listen).await.map_err(|e| format!("{listen}: {e}"))?;
        let addr = listener.local_addr().map_err(|e| e.to_string())?;
        let banner = if json {
            json!({"listening": addr.to_string()}).to_string()
        } else {
            format!("listening on http://{addr}")
        };
        if a.stdio {
            // stdout carries the protocol; keep it clean
            eprintln!("{banner}");
        } else {
            emit(out, banner)?;
            out.flush().map_err(|e| e.to_string())?;
        }
        let app = server::router(state.clone());
        let http = async move { axum::serve(listener, app).await.map_err(|e| e.to_string()) };
        if a.stdio {
            tokio::select! {
                r = server::serve_stdio(state) => r.map_err(|e| e.to_string()),
                r = http => r,
            }
        } else {
            http.await
        }
    })?;
    Ok(0)
}

/// Stand-in backend when the tool server could not be started.
struct Unavailable(String);

impl backend::ToolBackend for Unavailable {
    fn invoke(
        &self,
        _: &str,
        _: &serde_json::Map<String, serde_json::Value>,
    ) -> Result<serde_json::Value, backend::BackendError> {
        Err(backend::BackendError(format!("tool server unavailable: {}", self.0)))
    }
}
