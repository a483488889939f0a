//! Interrupts and operator decisions.
//!
//! An interrupt is raised before a gated action, persisted in the session
//! checkpoint, and resolved by exactly one decision. Decisions are appended to
//! `approvals.jsonl`, which is never rewritten.

use crate::canonical;
use crate::planner::PlanDefect;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterruptKind {
    PlanApproval,
    StepApproval,
    MemoryWrite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterruptRequest {
    pub interrupt_id: String,
    pub session_id: String,
    pub kind: InterruptKind,
    pub payload: Value,
    pub raised_at: DateTime<Utc>,
}

pub fn interrupt_id(session_id: &str, n: u32) -> String {
    format!("{session_id}-int-{n}")
}

/// Session id encoded in an interrupt id.
pub fn session_of(interrupt_id: &str) -> Option<&str> {
    interrupt_id.rsplit_once("-int-").map(|(s, _)| s).filter(|s| !s.is_empty())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Approve,
    Reject,
    Edit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApprovalDecision {
    pub interrupt_id: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_payload: Option<Value>,
    pub decided_by: String,
    pub decided_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
}

impl ApprovalDecision {
    pub fn new(interrupt_id: impl Into<String>, verdict: Verdict, decided_by: impl Into<String>, at: DateTime<Utc>) -> Self {
        ApprovalDecision {
            interrupt_id: interrupt_id.into(),
            verdict,
            edited_payload: None,
            decided_by: decided_by.into(),
            decided_at: at,
            request_id: None,
        }
    }

    pub fn with_edit(mut self, payload: Value) -> Self {
        self.edited_payload = Some(payload);
        self
    }

    pub fn with_request_id(mut self, id: impl Into<String>) -> Self {
        self.request_id = Some(id.into());
        self
    }

    /// Shape rules that do not depend on session state.
    pub fn check(&self, kind: InterruptKind) -> Result<(), ApprovalError> {
        if self.decided_by.trim().is_empty() {
            return Err(ApprovalError::MalformedDecision("decided_by is empty".into()));
        }
        match (self.verdict, &self.edited_payload) {
            (Verdict::Edit, None) => Err(ApprovalError::MalformedDecision("edit verdict needs edited_payload".into())),
            (Verdict::Approve | Verdict::Reject, Some(_)) => {
                Err(ApprovalError::MalformedDecision("edited_payload is only allowed with an edit verdict".into()))
            }
            (Verdict::Edit, Some(_)) if kind == InterruptKind::StepApproval => Err(ApprovalError::EditNotAllowed),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ApprovalError {
    #[error("unknown interrupt {0}")]
    UnknownInterrupt(String),
    #[error("interrupt {0} is already resolved")]
    AlreadyResolved(String),
    #[error("session already has a pending interrupt ({0})")]
    InterruptAlreadyPending(String),
    #[error("edit rejected: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidEdit(Vec<PlanDefect>),
    #[error("edit verdict is not allowed on step approvals")]
    EditNotAllowed,
    #[error("malformed decision: {0}")]
    MalformedDecision(String),
    #[error("audit log: {0}")]
    Io(String),
}

/// One line of the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    #[serde(flatten)]
    pub decision: ApprovalDecision,
    pub kind: InterruptKind,
    pub outcome: String,
}

#[derive(Debug, Clone)]
pub struct AuditLog {
    path: PathBuf,
}

impl AuditLog {
    pub fn new(session_dir: &Path) -> Self {
        AuditLog { path: session_dir.join("approvals.jsonl") }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &AuditRecord) -> Result<(), ApprovalError> {
        let io = |e: std::io::Error| ApprovalError::Io(e.to_string());
        let line = canonical::to_canonical_string(record).map_err(|e| ApprovalError::Io(e.to_string()))?;
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path).map_err(io)?;
        f.write_all(line.as_bytes()).map_err(io)?;
        f.write_all(b"\n").map_err(io)?;
        f.sync_all().map_err(io)
    }

    pub fn records(&self) -> Result<Vec<AuditRecord>, ApprovalError> {
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(ApprovalError::Io(e.to_string())),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| ApprovalError::Io(format!("corrupt audit line: {e}"))))
            .collect()
    }

    pub fn find(&self, interrupt_id: &str) -> Result<Option<AuditRecord>, ApprovalError> {
        Ok(self.records()?.into_iter().find(|r| r.decision.interrupt_id == interrupt_id))
    }
}
