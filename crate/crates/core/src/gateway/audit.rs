//! Append-only JSONL audit log, one per session.
//!
//! The first line is a [`LogHeader`] carrying the manifest and policy
//! snapshots, so a log can be replayed without any other input. Every
//! following line is one [`TraceEvent`].

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const LOG_FORMAT: &str = "labelgate-audit/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    CallProposed,
    Decision,
    CallExecuted,
    OutputIngested,
    ConfirmationRequested,
    ConfirmationResolved,
    Mask,
    Declassify,
    ObligationUpdate,
    Violation,
    SessionClosed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub timestamp: String,
    pub kind: EventKind,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    pub session_id: String,
    pub owner: String,
    pub internal_domains: Vec<String>,
    pub opened_at: String,
    pub manifests: Value,
    pub policy: Value,
}

pub(crate) struct AuditLog {
    header: LogHeader,
    events: Vec<TraceEvent>,
    file: Option<(PathBuf, BufWriter<File>)>,
}

impl AuditLog {
    pub(crate) fn open(header: LogHeader, dir: Option<&Path>) -> io::Result<Self> {
        let file = match dir {
            None => None,
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("{}.jsonl", header.session_id));
                let f = OpenOptions::new().create(true).append(true).open(&path)?;
                let mut w = BufWriter::new(f);
                serde_json::to_writer(&mut w, &header)?;
                w.write_all(b"\n")?;
                w.flush()?;
                Some((path, w))
            }
        };
        Ok(AuditLog { header, events: Vec::new(), file })
    }

    pub(crate) fn append(&mut self, kind: EventKind, payload: Value, now: DateTime<Utc>) -> io::Result<u64> {
        let seq = self.events.len() as u64;
        let event = TraceEvent { seq, timestamp: now.to_rfc3339_opts(SecondsFormat::Millis, true), kind, payload };
        if let Some((_, w)) = &mut self.file {
            // one write + flush per line keeps appends whole
            let mut line = serde_json::to_vec(&event)?;
            line.push(b'\n');
            w.write_all(&line)?;
            w.flush()?;
        }
        self.events.push(event);
        Ok(seq)
    }

    pub(crate) fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub(crate) fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    /// The complete log in its on-disk form.
    pub(crate) fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }
}
