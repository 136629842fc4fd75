use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Command, Stdio};

use labelgate::cli::run;
use serde_json::{json, Value};

const ROOT: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../..");

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(std::iter::once("labelgate").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn cli_json(args: &[&str]) -> (i32, Value) {
    let mut all = vec!["--json"];
    all.extend_from_slice(args);
    let (code, out, err) = cli(&all);
    (code, serde_json::from_str(&out).unwrap_or_else(|e| panic!("{e}: {out} {err}")))
}

#[test]
fn scenario_reports() {
    let (code, r) = cli_json(&["scenario", "fig1_leak", "--policy", "none"]);
    assert_eq!(code, 0);
    assert_eq!(r["leaked"], true);
    assert_eq!(r["emails_sent"].as_array().unwrap().len(), 3);

    let (_, r) = cli_json(&["scenario", "fig1_leak", "--policy", "spec1_blocklist"]);
    assert_eq!(r["leaked"], false);
    let blocked: Vec<&Value> = r["decisions"].as_array().unwrap().iter().filter(|d| d["verdict"] == "block").collect();
    assert_eq!(blocked.len(), 1);
    assert_eq!(blocked[0]["rule"], "spec1-no-private-to-non-recipient");

    let (_, r) = cli_json(&["scenario", "obligation_skip", "--policy", "spec1_spec2"]);
    assert_eq!(r["violations"].as_array().unwrap().len(), 2);
    let (_, r) = cli_json(&["scenario", "obligation_skip", "--policy", "none"]);
    assert!(r["violations"].as_array().unwrap().is_empty());
    assert_eq!(r["unnotified"].as_array().unwrap().len(), 2);

    let (code, _, err) = cli(&["scenario", "no_such", "--policy", "none"]);
    assert_eq!(code, 1);
    assert!(err.contains("no_such"));
}

#[test]
fn scenario_audit_log_replays_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let (_, r) = cli_json(&["scenario", "conflict_resolution_clean", "--policy", "spec1_spec2", "--audit-dir", d]);
    let log = r["audit_log"].as_str().unwrap();
    let (code, out, _) = cli(&["replay", log]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("0 mismatches"));

    let text = std::fs::read_to_string(log).unwrap();
    let cut: Vec<&str> = text.lines().filter(|l| !l.contains("\"decision\",")).collect();
    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, cut.join("\n")).unwrap();
    let (code, _, err) = cli(&["replay", broken.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error:"));
}

#[test]
fn verify_exit_codes() {
    let (code, r) = cli_json(&["verify", "--policy", "none", "--bound", "4", "--replay"]);
    assert_eq!(code, 1);
    assert_eq!(r["verdict"], "unsafe");
    assert_eq!(r["replay"]["confirmed"], true);
    assert_eq!(r["counterexample"]["steps"].as_array().unwrap().len(), 2);

    let (code, r) =
        cli_json(&["verify", "--policy", "spec1_spec2", "--witness", "list_events,update_event,send_email"]);
    assert_eq!(code, 0);
    assert_eq!(r["verdict"], "safe");
    assert_eq!(r["bound"], 6);
    assert_eq!(r["witness"].as_array().unwrap().len(), 3);

    let policy = format!("{ROOT}/policies/spec1_blocklist.json");
    let (code, out, _) = cli(&["verify", "--policy", &policy, "--bound", "3"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.starts_with("SAFE"));

    let (code, r) = cli_json(&["verify", "--hazard", "meteor"]);
    assert_eq!((code, r["verdict"].as_str()), (2, Some("error")));
    let (code, _, _) = cli(&["verify", "--policy", "missing.json"]);
    assert_eq!(code, 2);
    let (code, _, _) = cli(&["verify", "--bogus-flag"]);
    assert_eq!(code, 2);
}

#[test]
fn lint_and_policy_check() {
    let manifest = format!("{ROOT}/manifests/calendar.json");
    let (code, r) = cli_json(&["lint", &manifest]);
    assert_eq!(code, 0);
    assert_eq!(r["tools"], 3);
    for p in ["none", "spec1_blocklist", "spec1_spec2", "confirm_external"] {
        let path = format!("{ROOT}/policies/{p}.json");
        let (code, r) = cli_json(&["policy-check", &path, "--manifest", &manifest]);
        assert_eq!((code, &r["ok"]), (0, &json!(true)), "{p}");
    }
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"rules": [{"id": "x", "tier": "blocklist", "when": {"sink": {"tool": "fax"}}}]}"#)
        .unwrap();
    let (code, r) = cli_json(&["policy-check", bad.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(r["error"].is_string());
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_labelgate"))
}

#[test]
fn stdio_session_end_to_end() {
    let mut child = bin()
        .args(["serve", "--stdio", "--listen", "127.0.0.1:0", "--policy", "spec1_blocklist"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let mut ask = |msg: Value| -> Value {
        writeln!(stdin, "{msg}").unwrap();
        stdin.flush().unwrap();
        serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap()
    };
    let init = ask(json!({"jsonrpc": "2.0", "id": 1, "method": "initialize", "params": {}}));
    assert!(init["result"]["session_id"].is_string());
    let listed = ask(
        json!({"jsonrpc": "2.0", "id": 2, "method": "tools/call", "params": {"name": "list_events", "arguments": {}}}),
    );
    assert_eq!(listed["id"], 2);
    assert!(listed["result"]["structuredContent"]["events"].is_array());
    let leak = ask(json!({"jsonrpc": "2.0", "id": 3, "method": "tools/call",
        "params": {"name": "send_email", "arguments": {"to": "colleague@corp.example", "subject": "s", "body": "b"}}}));
    assert_eq!(leak["error"]["data"]["code"], "blocked");
    drop(stdin);
    assert!(child.wait().unwrap().success());
}

#[test]
fn http_server_answers_health_checks() {
    let mut child = bin()
        .args(["--json", "serve", "--listen", "127.0.0.1:0", "--token", "t"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut banner = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut banner).unwrap();
    let addr = serde_json::from_str::<Value>(&banner).unwrap()["listening"].as_str().unwrap().to_owned();

    let get = |path: &str| {
        let mut s = TcpStream::connect(&addr).unwrap();
        write!(s, "GET {path} HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
        let mut resp = String::new();
        s.read_to_string(&mut resp).unwrap();
        resp
    };
    assert!(get("/healthz").starts_with("HTTP/1.1 200"));
    assert!(get("/pending").starts_with("HTTP/1.1 401"));
    child.kill().unwrap();
    child.wait().unwrap();
}
