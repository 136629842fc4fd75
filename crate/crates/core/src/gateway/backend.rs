//! Tool backends: the only place a tool actually runs.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde_json::{json, Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("backend failure: {0}")]
pub struct BackendError(pub String);

/// Narrow interface to a tool server.
pub trait ToolBackend: Send + Sync {
    fn invoke(&self, tool: &str, arguments: &Map<String, Value>) -> Result<Value, BackendError>;
}

impl<T: ToolBackend + ?Sized> ToolBackend for Arc<T> {
    fn invoke(&self, tool: &str, arguments: &Map<String, Value>) -> Result<Value, BackendError> {
        (**self).invoke(tool, arguments)
    }
}

/// Creates the backend a new session talks to.
pub type BackendFactory = Arc<dyn Fn(&str) -> Arc<dyn ToolBackend> + Send + Sync>;

/// One backend shared by every session.
pub fn shared(backend: Arc<dyn ToolBackend>) -> BackendFactory {
    Arc::new(move |_| backend.clone())
}

/// Wraps a backend and records every invocation.
pub struct Recording<B> {
    inner: B,
    calls: Mutex<Vec<(String, Map<String, Value>)>>,
    count: AtomicUsize,
}

impl<B: ToolBackend> Recording<B> {
    pub fn new(inner: B) -> Self {
        Recording { inner, calls: Mutex::new(Vec::new()), count: AtomicUsize::new(0) }
    }

    pub fn invocations(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> Vec<(String, Map<String, Value>)> {
        self.calls.lock().clone()
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ToolBackend> ToolBackend for Recording<B> {
    fn invoke(&self, tool: &str, arguments: &Map<String, Value>) -> Result<Value, BackendError> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.calls.lock().push((tool.to_owned(), arguments.clone()));
        self.inner.invoke(tool, arguments)
    }
}

/// A tool server in a child process speaking line-delimited JSON-RPC 2.0
/// (`tools/call`) over stdin/stdout.
pub struct StdioToolServer {
    io: Mutex<ServerIo>,
}

struct ServerIo {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    next_id: u64,
}

impl StdioToolServer {
    pub fn spawn(program: &str, args: &[String]) -> std::io::Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(StdioToolServer { io: Mutex::new(ServerIo { child, stdin, stdout, next_id: 0 }) })
    }
}

impl ToolBackend for StdioToolServer {
    fn invoke(&self, tool: &str, arguments: &Map<String, Value>) -> Result<Value, BackendError> {
        let mut io = self.io.lock();
        io.next_id += 1;
        let id = io.next_id;
        let req = json!({
            "jsonrpc": "2.0",
            "id": id,
            "method": "tools/call",
            "params": {"name": tool, "arguments": arguments},
        });
        let fail = |e: std::io::Error| BackendError(e.to_string());
        let mut line = serde_json::to_vec(&req).expect("request serializes");
        line.push(b'\n');
        io.stdin.write_all(&line).map_err(fail)?;
        io.stdin.flush().map_err(fail)?;
        let mut buf = String::new();
        if io.stdout.read_line(&mut buf).map_err(fail)? == 0 {
            return Err(BackendError("tool server closed its output".into()));
        }
        let resp: Value = serde_json::from_str(&buf).map_err(|e| BackendError(format!("bad response: {e}")))?;
        if resp.get("id") != Some(&json!(id)) {
            return Err(BackendError("response id does not match request".into()));
        }
        if let Some(err) = resp.get("error") {
            return Err(BackendError(err.to_string()));
        }
        resp.get("result").cloned().ok_or_else(|| BackendError("response has no result".into()))
    }
}

impl Drop for StdioToolServer {
    fn drop(&mut self) {
        let io = self.io.get_mut();
        let _ = io.child.kill();
        let _ = io.child.wait();
    }
}
