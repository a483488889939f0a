//! Append-only execution event log.

use crate::canonical;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    StepStarted,
    StepSucceeded,
    StepFailed,
    Recovery,
    InterruptRaised,
    InterruptResolved,
    PlanRevised,
    SessionCompleted,
    SessionAborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionEvent {
    pub sequence: u64,
    pub kind: EventKind,
    pub step_index: Option<u32>,
    pub payload: Value,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EventLogError {
    #[error("event log io: {0}")]
    Io(String),
    #[error("corrupt event log line {line}: {detail}")]
    Corrupt { line: usize, detail: String },
    #[error("sequence gap: expected {expected}, found {found}")]
    Gap { expected: u64, found: u64 },
}

#[derive(Debug, Clone)]
pub struct EventLog {
    path: PathBuf,
}

impl EventLog {
    pub fn new(session_dir: &Path) -> Self {
        EventLog { path: session_dir.join("events.jsonl") }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, event: &ExecutionEvent) -> Result<(), EventLogError> {
        let io = |e: std::io::Error| EventLogError::Io(e.to_string());
        let mut line = canonical::to_canonical_string(event).map_err(|e| EventLogError::Io(e.to_string()))?;
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path).map_err(io)?;
        f.write_all(line.as_bytes()).map_err(io)?;
        f.sync_data().map_err(io)
    }

    pub fn read_all(&self) -> Result<Vec<ExecutionEvent>, EventLogError> {
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(EventLogError::Io(e.to_string())),
        };
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<ExecutionEvent>(line) {
                Ok(ev) => {
                    let expected = out.len() as u64 + 1;
                    if ev.sequence != expected {
                        return Err(EventLogError::Gap { expected, found: ev.sequence });
                    }
                    out.push(ev);
                }
                // A torn final line from a crash mid-append is dropped.
                Err(_) if i + 1 == text.lines().count() && !text.ends_with('\n') => break,
                Err(e) => return Err(EventLogError::Corrupt { line: i + 1, detail: e.to_string() }),
            }
        }
        Ok(out)
    }

    /// Events with `sequence >= from`.
    pub fn read_from(&self, from: u64) -> Result<Vec<ExecutionEvent>, EventLogError> {
        Ok(self.read_all()?.into_iter().filter(|e| e.sequence >= from).collect())
    }

    /// Drops events the last checkpoint does not know about.
    pub fn truncate_from(&self, next_seq: u64) -> Result<usize, EventLogError> {
        let all = self.read_all()?;
        let keep: Vec<_> = all.iter().filter(|e| e.sequence < next_seq).collect();
        let dropped = all.len() - keep.len();
        let raw = fs::read_to_string(&self.path).unwrap_or_default();
        if dropped == 0 && (raw.is_empty() || raw.ends_with('\n')) {
            return Ok(0);
        }
        let mut text = String::new();
        for e in keep {
            text.push_str(&canonical::to_canonical_string(e).map_err(|e| EventLogError::Io(e.to_string()))?);
            text.push('\n');
        }
        super::checkpoint::write_atomic(&self.path, text.as_bytes()).map_err(|e| EventLogError::Io(e.to_string()))?;
        Ok(dropped)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use serde_json::json;

    fn ev(seq: u64) -> ExecutionEvent {
        ExecutionEvent {
            sequence: seq,
            kind: EventKind::StepStarted,
            step_index: Some(seq as u32),
            payload: json!({}),
            timestamp: Utc.with_ymd_and_hms(2025, 8, 9, 0, 0, 0).unwrap(),
        }
    }

    #[test]
    fn append_read_truncate() {
        let dir = tempfile::tempdir().unwrap();
        let log = EventLog::new(dir.path());
        for s in 1..=5 {
            log.append(&ev(s)).unwrap();
        }
        assert_eq!(log.read_all().unwrap().len(), 5);
        assert_eq!(log.read_from(4).unwrap().iter().map(|e| e.sequence).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(log.truncate_from(3).unwrap(), 3);
        assert_eq!(log.read_all().unwrap().len(), 2);
        assert_eq!(log.truncate_from(3).unwrap(), 0);
    }

    #[test]
    fn torn_tail_is_ignored_and_gaps_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let log = EventLog::new(dir.path());
        log.append(&ev(1)).unwrap();
        let mut f = OpenOptions::new().append(true).open(log.path()).unwrap();
        f.write_all(b"{\"sequence\":2,\"ki").unwrap();
        assert_eq!(log.read_all().unwrap().len(), 1);
        log.truncate_from(2).unwrap();
        log.append(&ev(3)).unwrap();
        assert_eq!(log.read_all(), Err(EventLogError::Gap { expected: 2, found: 3 }));
    }

    #[test]
    fn line_format_is_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let log = EventLog::new(dir.path());
        log.append(&ev(1)).unwrap();
        assert_eq!(
            fs::read_to_string(log.path()).unwrap(),
            "{\"kind\":\"step_started\",\"payload\":{},\"sequence\":1,\"step_index\":1,\"timestamp\":\"2025-08-09T00:00:00Z\"}\n"
        );
    }
}
