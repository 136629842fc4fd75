//! Compiles and runs a small C program against the generated header and the
//! shared library. Skipped when no C compiler is on PATH.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "labelgate.h"

static const char *invoke(void *ud, const char *tool, const char *args) {
    (void)ud; (void)args;
    return strcmp(tool, "list_events") == 0 ? "{\"events\": []}" : NULL;
}

int main(int argc, char **argv) {
    (void)argc;
    LgGateway *gw = NULL;
    if (lg_gateway_new(argv[1], NULL, NULL, invoke, NULL, NULL, &gw) != LG_STATUS_OK) return 10;
    char *sid = NULL;
    if (lg_session_open(gw, "user@corp.example", &sid) != LG_STATUS_OK) return 11;
    char *out = NULL;
    if (lg_intercept(gw, sid, "{\"tool\":\"list_events\",\"arguments\":{}}", &out) != LG_STATUS_OK) return 12;
    if (strstr(out, "executed") == NULL) return 13;
    lg_string_free(out);
    if (lg_intercept(gw, "nope", "{\"tool\":\"list_events\",\"arguments\":{}}", &out) != LG_STATUS_UNKNOWN_SESSION) return 14;
    if (lg_last_error() == NULL) return 15;
    lg_string_free(sid);
    lg_gateway_free(gw);
    puts("ok");
    return 0;
}
"#;

fn compiler() -> Option<&'static str> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
}

#[test]
fn c_program_links_and_runs() {
    let Some(cc) = compiler() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test> -> target/<profile>
    let lib_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    if !lib_dir.join("liblabelgate_ffi.so").exists() {
        eprintln!("shared library not built in {}; skipping", lib_dir.display());
        return;
    }
    let work = tempfile::tempdir().unwrap();
    let src = work.path().join("main.c");
    let exe = work.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg("-L")
        .arg(&lib_dir)
        .arg("-llabelgate_ffi")
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let manifest = std::fs::read_to_string(crate_dir.join("../../manifests/calendar.json")).unwrap();
    let out = Command::new(&exe).arg(manifest).env("LD_LIBRARY_PATH", &lib_dir).output().unwrap();
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
