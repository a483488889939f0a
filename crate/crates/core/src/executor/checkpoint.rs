//! Durable per-session checkpoints.

use crate::approval::InterruptRequest;
use crate::canonical;
use crate::context::{ContextSnapshot, ExtractedTask};
use crate::planner::ExecutionPlan;
use crate::registry::ActiveCapabilitySet;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    PendingApproval,
    Running,
    SuspendedInterrupt,
    Completed,
    Aborted,
}

impl SessionStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, SessionStatus::Completed | SessionStatus::Aborted)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::PendingApproval => "pending_approval",
            SessionStatus::Running => "running",
            SessionStatus::SuspendedInterrupt => "suspended_interrupt",
            SessionStatus::Completed => "completed",
            SessionStatus::Aborted => "aborted",
        }
    }

    /// Edges of the lifecycle graph. Self-loops are not transitions.
    pub fn can_transition(self, to: SessionStatus) -> bool {
        use SessionStatus::*;
        matches!(
            (self, to),
            (PendingApproval, Running)
                | (PendingApproval, Aborted)
                | (Running, SuspendedInterrupt)
                | (SuspendedInterrupt, Running)
                | (SuspendedInterrupt, Aborted)
                | (Running, Completed)
                | (Running, Aborted)
        )
    }
}

impl fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub session_id: String,
    pub status: SessionStatus,
    pub plan: Option<ExecutionPlan>,
    /// Next step index to run, in `1..=steps+1`.
    pub cursor: u32,
    pub context: ContextSnapshot,
    pub pending_interrupt: Option<InterruptRequest>,
    /// Retries spent per step index within the current plan revision.
    pub attempt_counters: BTreeMap<u32, u32>,
    pub replan_count: u32,
    pub reclassify_count: u32,
    pub task: Option<ExtractedTask>,
    pub active: Option<ActiveCapabilitySet>,
    pub next_event_seq: u64,
    pub interrupt_counter: u32,
    /// Step whose approval has been granted but not yet consumed.
    pub approved_step: Option<u32>,
    /// Provider preparation rendered into a step approval.
    pub prepared: Option<Value>,
    /// Failure detail of a replan that was decided but not yet carried out.
    pub pending_replan: Option<String>,
    pub abort_reason: Option<String>,
}

impl Checkpoint {
    pub fn new(session_id: impl Into<String>) -> Self {
        Checkpoint {
            session_id: session_id.into(),
            status: SessionStatus::PendingApproval,
            plan: None,
            cursor: 1,
            context: ContextSnapshot::default(),
            pending_interrupt: None,
            attempt_counters: BTreeMap::new(),
            replan_count: 0,
            reclassify_count: 0,
            task: None,
            active: None,
            next_event_seq: 1,
            interrupt_counter: 0,
            approved_step: None,
            prepared: None,
            pending_replan: None,
            abort_reason: None,
        }
    }

    pub fn to_document(&self) -> String {
        canonical::to_canonical_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_document(text: &str) -> Result<Self, CheckpointError> {
        let cp: Checkpoint = serde_json::from_str(text).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let steps = cp.plan.as_ref().map_or(0, |p| p.steps.len() as u32);
        if cp.cursor < 1 || cp.cursor > steps + 1 {
            return Err(CheckpointError::Corrupt(format!("cursor {} outside 1..={}", cp.cursor, steps + 1)));
        }
        Ok(cp)
    }
}

/// Why a checkpoint was written; only step outcomes separate two step starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteTag {
    Lifecycle,
    StepOutcome,
    Interrupt,
    Resolution,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint io: {0}")]
    Io(String),
}

fn io(e: std::io::Error) -> CheckpointError {
    CheckpointError::Io(e.to_string())
}

/// Temp file, fsync, atomic rename, directory fsync.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().expect("path has a parent");
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("file")
    ));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    File::open(dir)?.sync_all()
}

#[derive(Debug)]
pub struct CheckpointStore {
    sessions_dir: PathBuf,
    writes: Mutex<Vec<(String, WriteTag)>>,
    /// Keeps in-process readers from seeing a document without its sidecar.
    io_lock: RwLock<()>,
}

impl CheckpointStore {
    pub fn new(data_dir: &Path) -> Self {
        CheckpointStore { sessions_dir: data_dir.join("sessions"), writes: Mutex::new(Vec::new()), io_lock: RwLock::new(()) }
    }

    pub fn session_dir(&self, session_id: &str) -> PathBuf {
        self.sessions_dir.join(session_id)
    }

    pub fn exists(&self, session_id: &str) -> bool {
        self.session_dir(session_id).join("checkpoint.json").exists()
    }

    pub fn write(&self, checkpoint: &Checkpoint, tag: WriteTag) -> Result<(), CheckpointError> {
        let dir = self.session_dir(&checkpoint.session_id);
        fs::create_dir_all(&dir).map_err(io)?;
        let doc = checkpoint.to_document();
        let digest = canonical::sha256_hex(doc.as_bytes());
        let _guard = self.io_lock.write();
        write_atomic(&dir.join("checkpoint.json"), doc.as_bytes()).map_err(io)?;
        write_atomic(&dir.join("checkpoint.json.sha256"), format!("{digest}\n").as_bytes()).map_err(io)?;
        self.writes.lock().push((checkpoint.session_id.clone(), tag));
        Ok(())
    }

    pub fn read(&self, session_id: &str) -> Result<Checkpoint, CheckpointError> {
        let dir = self.session_dir(session_id);
        let guard = self.io_lock.read();
        let doc = match fs::read(dir.join("checkpoint.json")) {
            Ok(d) => d,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(CheckpointError::UnknownSession(session_id.to_string()))
            }
            Err(e) => return Err(io(e)),
        };
        let expected = fs::read_to_string(dir.join("checkpoint.json.sha256"))
            .map_err(|e| CheckpointError::Corrupt(format!("digest sidecar unreadable: {e}")))?;
        drop(guard);
        if canonical::sha256_hex(&doc) != expected.trim() {
            return Err(CheckpointError::Corrupt("digest mismatch".into()));
        }
        let text = String::from_utf8(doc).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let cp = Checkpoint::from_document(&text)?;
        if cp.session_id != session_id {
            return Err(CheckpointError::Corrupt(format!("checkpoint belongs to {}", cp.session_id)));
        }
        Ok(cp)
    }

    /// Writes made through this store, in order.
    pub fn write_log(&self, session_id: &str) -> Vec<WriteTag> {
        self.writes.lock().iter().filter(|(s, _)| s == session_id).map(|(_, t)| *t).collect()
    }
}
