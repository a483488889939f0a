//! Session orchestration: conversation in, plan out, plan executed.
//!
//! Every state change of a session goes through one lock and ends in a
//! checkpoint write, so the on-disk checkpoint is always the last state a
//! caller could have observed.

use crate::approval::{
    self, ApprovalDecision, ApprovalError, AuditLog, AuditRecord, InterruptKind, InterruptRequest, Verdict,
};
use crate::artifacts::{Artifact, ArtifactError, ArtifactStore, BundleBuilder};
use crate::canonical;
use crate::clock::SharedClock;
use crate::context::{ContextError, ContextKey, ContextStore, ConversationHistory, Role};
use crate::executor::checkpoint::write_atomic;
use crate::executor::{
    self, classify_error, Backoff, Budgets, Checkpoint, CheckpointError, CheckpointStore, Counters, ErrorClass,
    EventKind, EventLog, ExecutionEvent, Phase, RecoveryKind, SessionStatus, WriteTag,
};
use crate::extraction::{self, ExtractionError, MemoryEntry, MemoryStore, SourceBundle, TaskOutcome};
use crate::gateway::{Gateway, GatewayError};
use crate::planner::{self, ExecutionPlan, GenerateOptions, PlanError, PlanScope};
use crate::provider::{gateway_class, ProviderContext, ProviderError, ProviderRegistry};
use crate::registry::{self, Registry, RegistryError};
use crate::script::ScriptService;
use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

pub const AUTO_APPROVER: &str = "auto-approve";
pub const OPERATOR_REJECTION: &str = "operator rejection";

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub data_dir: PathBuf,
    pub budgets: Budgets,
    /// Every generated plan waits for an operator decision.
    pub planning_mode: bool,
    /// Resolve plan and step approvals immediately as [`AUTO_APPROVER`].
    pub auto_approve: bool,
    pub backoff: Backoff,
    pub history_budget: usize,
    pub max_repair_attempts: u32,
    /// Exit the process right after the k-th step-outcome checkpoint.
    pub crash_after_checkpoint: Option<u32>,
    /// Providers cross-check their results against engine-side oracles.
    pub verify: bool,
}

impl EngineConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        EngineConfig {
            data_dir: data_dir.into(),
            budgets: Budgets::default(),
            planning_mode: true,
            auto_approve: false,
            backoff: Backoff::LIVE,
            history_budget: 2000,
            max_repair_attempts: 2,
            crash_after_checkpoint: None,
            verify: false,
        }
    }

    /// Reads `AB_PLANNING_MODE` and `AB_CRASH_AFTER_CHECKPOINT`.
    pub fn with_env(mut self) -> Self {
        if let Ok(v) = std::env::var("AB_PLANNING_MODE") {
            self.planning_mode = !matches!(v.trim().to_ascii_lowercase().as_str(), "0" | "off" | "false" | "no");
        }
        self.crash_after_checkpoint =
            std::env::var("AB_CRASH_AFTER_CHECKPOINT").ok().and_then(|v| v.trim().parse().ok()).filter(|k| *k > 0);
        self
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} already exists")]
    SessionExists(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("session {0} is not in a terminal state")]
    NotTerminal(String),
    #[error(transparent)]
    Approval(#[from] ApprovalError),
    #[error(transparent)]
    Checkpoint(CheckpointError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Artifact(ArtifactError),
    #[error("storage: {0}")]
    Io(String),
}

impl From<CheckpointError> for EngineError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::UnknownSession(s) => EngineError::UnknownSession(s),
            other => EngineError::Checkpoint(other),
        }
    }
}

impl From<ArtifactError> for EngineError {
    fn from(e: ArtifactError) -> Self {
        match e {
            ArtifactError::UnknownSession(s) => EngineError::UnknownSession(s),
            ArtifactError::SessionNotTerminal(s) => EngineError::NotTerminal(s),
            other => EngineError::Artifact(other),
        }
    }
}

impl From<ContextError> for EngineError {
    fn from(e: ContextError) -> Self {
        match e {
            ContextError::UnknownSession(s) => EngineError::UnknownSession(s),
            other => EngineError::Io(other.to_string()),
        }
    }
}

fn io_err(e: impl std::fmt::Display) -> EngineError {
    EngineError::Io(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub user_id: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub user_id: String,
    pub created_at: DateTime<Utc>,
    pub status: SessionStatus,
    pub plan_id: Option<String>,
    pub revision: Option<u32>,
    pub pending_interrupt: Option<InterruptRequest>,
    pub abort_reason: Option<String>,
}

/// Result of posting a user message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageOutcome {
    pub session_id: String,
    pub status: SessionStatus,
    /// Clarification when the message held no actionable task.
    pub reply: Option<String>,
    pub task: Option<crate::context::ExtractedTask>,
    pub active_summary: Option<String>,
    pub plan: Option<ExecutionPlan>,
    pub pending_interrupt: Option<InterruptRequest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionOutcome {
    pub interrupt_id: String,
    pub verdict: Verdict,
    pub status: SessionStatus,
    pub pending_interrupt: Option<InterruptRequest>,
}

/// Ordered record of event appends and checkpoint writes, for invariants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEntry {
    Event(EventKind, Option<u32>),
    Checkpoint(WriteTag),
}

struct SessionState {
    info: SessionInfo,
    cp: Checkpoint,
    history: ConversationHistory,
}

pub struct Engine {
    config: EngineConfig,
    registry: Arc<Registry>,
    providers: Arc<ProviderRegistry>,
    gateway: Gateway,
    clock: SharedClock,
    checkpoints: CheckpointStore,
    contexts: ContextStore,
    artifacts: ArtifactStore,
    scripts: ScriptService,
    memory: MemoryStore,
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionState>>>>,
    step_outcomes: AtomicU32,
    id_counter: AtomicU64,
    trace: Mutex<Vec<(String, TraceEntry)>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("data_dir", &self.config.data_dir).finish_non_exhaustive()
    }
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        && !id.contains("-int-")
}

impl Engine {
    pub fn new(
        config: EngineConfig,
        registry: Arc<Registry>,
        providers: Arc<ProviderRegistry>,
        gateway: Gateway,
        clock: SharedClock,
        scripts: ScriptService,
    ) -> Result<Self, EngineError> {
        fs::create_dir_all(config.data_dir.join("sessions")).map_err(io_err)?;
        Ok(Engine {
            checkpoints: CheckpointStore::new(&config.data_dir),
            artifacts: ArtifactStore::new(&config.data_dir),
            memory: MemoryStore::new(&config.data_dir),
            contexts: ContextStore::new(),
            sessions: Mutex::new(HashMap::new()),
            step_outcomes: AtomicU32::new(0),
            id_counter: AtomicU64::new(0),
            trace: Mutex::new(Vec::new()),
            config,
            registry,
            providers,
            gateway,
            clock,
            scripts,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn providers(&self) -> &ProviderRegistry {
        &self.providers
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn contexts(&self) -> &ContextStore {
        &self.contexts
    }

    pub fn memory(&self) -> &MemoryStore {
        &self.memory
    }

    pub fn checkpoints(&self) -> &CheckpointStore {
        &self.checkpoints
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.checkpoints.session_dir(id)
    }

    pub fn trace(&self, session_id: &str) -> Vec<TraceEntry> {
        self.trace.lock().iter().filter(|(s, _)| s == session_id).map(|(_, t)| *t).collect()
    }

    // ---- session lifecycle -------------------------------------------------

    pub fn create_session(&self, user_id: &str, session_id: Option<&str>) -> Result<SessionRecord, EngineError> {
        if user_id.is_empty() || !user_id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')) {
            return Err(EngineError::InvalidInput(format!("user id {user_id:?}")));
        }
        let id = match session_id {
            Some(id) => id.to_string(),
            None => {
                let n = self.id_counter.fetch_add(1, Ordering::SeqCst);
                let nanos = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_nanos())
                    .unwrap_or(0);
                let seed = format!("{user_id}/{nanos}/{n}/{}", std::process::id());
                format!("s-{}", &canonical::sha256_hex(seed.as_bytes())[..12])
            }
        };
        if !valid_session_id(&id) {
            return Err(EngineError::InvalidInput(format!("session id {id:?}")));
        }
        let mut sessions = self.sessions.lock();
        if sessions.contains_key(&id) || self.checkpoints.exists(&id) {
            return Err(EngineError::SessionExists(id));
        }
        let info = SessionInfo { session_id: id.clone(), user_id: user_id.into(), created_at: self.clock.now() };
        let dir = self.session_dir(&id);
        fs::create_dir_all(&dir).map_err(io_err)?;
        write_atomic(&dir.join("session.json"), canonical::to_canonical_pretty(&info).map_err(io_err)?.as_bytes())
            .map_err(io_err)?;
        self.contexts.open_session(&id);
        let mut state = SessionState { info, cp: Checkpoint::new(&id), history: ConversationHistory::new(&id) };
        self.save_history(&state)?;
        self.checkpoint(&mut state, WriteTag::Lifecycle)?;
        let record = self.record_of(&state);
        sessions.insert(id, Arc::new(Mutex::new(state)));
        Ok(record)
    }

    fn load_state(&self, id: &str) -> Result<SessionState, EngineError> {
        if !valid_session_id(id) {
            return Err(EngineError::UnknownSession(id.into()));
        }
        let cp = self.checkpoints.read(id)?;
        let dir = self.session_dir(id);
        let info: SessionInfo = serde_json::from_slice(&fs::read(dir.join("session.json")).map_err(io_err)?)
            .map_err(io_err)?;
        let history: ConversationHistory = match fs::read(dir.join("history.json")) {
            Ok(b) => serde_json::from_slice(&b).map_err(io_err)?,
            Err(_) => ConversationHistory::new(id),
        };
        self.contexts.restore_session(id, cp.context.clone())?;
        EventLog::new(&dir).truncate_from(cp.next_event_seq).map_err(io_err)?;
        Ok(SessionState { info, cp, history })
    }

    fn state(&self, id: &str) -> Result<Arc<Mutex<SessionState>>, EngineError> {
        let mut sessions = self.sessions.lock();
        if let Some(s) = sessions.get(id) {
            return Ok(s.clone());
        }
        let state = Arc::new(Mutex::new(self.load_state(id)?));
        sessions.insert(id.to_string(), state.clone());
        Ok(state)
    }

    fn record_of(&self, state: &SessionState) -> SessionRecord {
        SessionRecord {
            session_id: state.info.session_id.clone(),
            user_id: state.info.user_id.clone(),
            created_at: state.info.created_at,
            status: state.cp.status,
            plan_id: state.cp.plan.as_ref().map(|p| p.plan_id.clone()),
            revision: state.cp.plan.as_ref().map(|p| p.revision),
            pending_interrupt: state.cp.pending_interrupt.clone(),
            abort_reason: state.cp.abort_reason.clone(),
        }
    }

    /// Read from the durable checkpoint, not from memory.
    pub fn session_record(&self, id: &str) -> Result<SessionRecord, EngineError> {
        if !valid_session_id(id) {
            return Err(EngineError::UnknownSession(id.into()));
        }
        let cp = self.checkpoints.read(id)?;
        let info: SessionInfo =
            serde_json::from_slice(&fs::read(self.session_dir(id).join("session.json")).map_err(io_err)?)
                .map_err(io_err)?;
        Ok(SessionRecord {
            session_id: info.session_id,
            user_id: info.user_id,
            created_at: info.created_at,
            status: cp.status,
            plan_id: cp.plan.as_ref().map(|p| p.plan_id.clone()),
            revision: cp.plan.as_ref().map(|p| p.revision),
            pending_interrupt: cp.pending_interrupt,
            abort_reason: cp.abort_reason,
        })
    }

    pub fn checkpoint_of(&self, id: &str) -> Result<Checkpoint, EngineError> {
        if !valid_session_id(id) {
            return Err(EngineError::UnknownSession(id.into()));
        }
        Ok(self.checkpoints.read(id)?)
    }

    pub fn plan(&self, id: &str) -> Result<Option<ExecutionPlan>, EngineError> {
        Ok(self.checkpoint_of(id)?.plan)
    }

    pub fn events(&self, id: &str, from: u64) -> Result<Vec<ExecutionEvent>, EngineError> {
        self.checkpoint_of(id)?;
        EventLog::new(&self.session_dir(id)).read_from(from).map_err(io_err)
    }

    pub fn artifacts(&self, id: &str) -> Result<Vec<Artifact>, EngineError> {
        self.checkpoint_of(id)?;
        Ok(self.artifacts.list(id)?)
    }

    pub fn artifact(&self, artifact_id: &str) -> Result<(Artifact, Vec<u8>), EngineError> {
        let meta = self.artifacts.find(artifact_id)?;
        let bytes = self.artifacts.read_blob(artifact_id)?;
        Ok((meta, bytes))
    }

    pub fn history(&self, id: &str) -> Result<ConversationHistory, EngineError> {
        Ok(self.state(id)?.lock().history.clone())
    }

    // ---- persistence helpers ----------------------------------------------

    fn save_history(&self, state: &SessionState) -> Result<(), EngineError> {
        let doc = canonical::to_canonical_pretty(&state.history).map_err(io_err)?;
        write_atomic(&self.session_dir(&state.info.session_id).join("history.json"), doc.as_bytes()).map_err(io_err)
    }

    fn checkpoint(&self, state: &mut SessionState, tag: WriteTag) -> Result<(), EngineError> {
        let id = state.info.session_id.clone();
        state.cp.context = self.contexts.snapshot(&id)?;
        self.checkpoints.write(&state.cp, tag)?;
        self.trace.lock().push((id, TraceEntry::Checkpoint(tag)));
        if tag == WriteTag::StepOutcome {
            let n = self.step_outcomes.fetch_add(1, Ordering::SeqCst) + 1;
            if self.config.crash_after_checkpoint == Some(n) {
                tracing::warn!(checkpoint = n, "crash hook triggered");
                std::process::exit(86);
            }
        }
        Ok(())
    }

    fn emit(&self, state: &mut SessionState, kind: EventKind, step: Option<u32>, payload: Value) -> Result<(), EngineError> {
        let event = ExecutionEvent {
            sequence: state.cp.next_event_seq,
            kind,
            step_index: step,
            payload,
            timestamp: self.clock.now(),
        };
        EventLog::new(&self.session_dir(&state.info.session_id)).append(&event).map_err(io_err)?;
        state.cp.next_event_seq += 1;
        self.trace.lock().push((state.info.session_id.clone(), TraceEntry::Event(kind, step)));
        Ok(())
    }

    fn set_status(state: &mut SessionState, to: SessionStatus) {
        if state.cp.status != to {
            debug_assert!(state.cp.status.can_transition(to), "{} -> {}", state.cp.status, to);
            state.cp.status = to;
        }
    }

    fn abort(&self, state: &mut SessionState, reason: &str, tag: WriteTag) -> Result<(), EngineError> {
        state.cp.abort_reason = Some(reason.to_string());
        state.cp.pending_replan = None;
        Self::set_status(state, SessionStatus::Aborted);
        self.emit(state, EventKind::SessionAborted, None, json!({ "reason": reason }))?;
        self.checkpoint(state, tag)
    }

    // ---- conversation and planning ------------------------------------------

    pub fn post_message(&self, id: &str, text: &str) -> Result<MessageOutcome, EngineError> {
        if text.trim().is_empty() {
            return Err(EngineError::InvalidInput("message text is empty".into()));
        }
        let handle = self.state(id)?;
        let mut state = handle.lock();
        if state.cp.plan.is_some() || state.cp.status != SessionStatus::PendingApproval || state.cp.task.is_some() {
            return Err(EngineError::Conflict(format!("session {id} already has a task ({})", state.cp.status)));
        }
        let now = self.clock.now();
        state.history.push(Role::User, text, now).map_err(|e| EngineError::InvalidInput(e.to_string()))?;
        self.save_history(&state)?;

        let condensed =
            extraction::compress_history(&self.gateway, &state.history, self.config.history_budget, self.config.max_repair_attempts)?;
        let sources = SourceBundle { memory: self.memory.load(&state.info.user_id)?, ..Default::default() };
        let outcome = extraction::extract_task(&self.gateway, &condensed, &sources, self.config.max_repair_attempts)?;
        let task = match outcome {
            TaskOutcome::EmptyTask { clarification } => {
                state.history.push(Role::Assistant, clarification.clone(), self.clock.now()).ok();
                self.save_history(&state)?;
                return Ok(MessageOutcome {
                    session_id: id.into(),
                    status: state.cp.status,
                    reply: Some(clarification),
                    task: None,
                    active_summary: None,
                    plan: None,
                    pending_interrupt: None,
                });
            }
            TaskOutcome::Task(t) => t,
        };
        state.cp.task = Some(task.clone());
        self.plan_phase(&mut state, None)?;
        if self.config.auto_approve {
            self.auto_resolve(&mut state)?;
        }
        Ok(MessageOutcome {
            session_id: id.into(),
            status: state.cp.status,
            reply: None,
            task: Some(task),
            active_summary: state.cp.active.as_ref().map(|a| a.summary()),
            plan: state.cp.plan.clone(),
            pending_interrupt: state.cp.pending_interrupt.clone(),
        })
    }

    /// Classification and plan generation with their recovery paths. Ends
    /// with a plan installed (and possibly awaiting approval) or an abort.
    fn plan_phase(&self, state: &mut SessionState, mut failure: Option<String>) -> Result<(), EngineError> {
        let id = state.info.session_id.clone();
        let task = state.cp.task.clone().expect("planning needs a task");
        let budgets = self.config.budgets;
        loop {
            let counters = Counters { attempts: 0, replans: state.cp.replan_count, reclassifies: state.cp.reclassify_count };
            if state.cp.active.is_none() {
                match registry::classify_all(&self.gateway, &task, &self.registry, self.config.max_repair_attempts) {
                    Ok(active) => state.cp.active = Some(active),
                    Err(e) => {
                        let class = match &e {
                            RegistryError::ClassificationFailed(f) => f
                                .iter()
                                .map(|(_, g)| gateway_class(g))
                                .find(|c| *c == ErrorClass::BackendRejected)
                                .unwrap_or(ErrorClass::StructuredOutput),
                            _ => ErrorClass::Permanent,
                        };
                        let action = classify_error(class, Phase::Classification, &e.to_string(), None, counters, budgets);
                        self.emit(state, EventKind::Recovery, None, json!({"kind": action.kind, "reason": action.reason, "phase": "classification"}))?;
                        if action.kind == RecoveryKind::Reclassify {
                            state.cp.reclassify_count += 1;
                            continue;
                        }
                        return self.abort(state, &action.reason, WriteTag::Lifecycle);
                    }
                }
            }
            let active = state.cp.active.clone().expect("classified");
            let inventory = self.contexts.inventory(&id)?;
            let inventory_keys: BTreeSet<ContextKey> = inventory.iter().map(|e| e.key.clone()).collect();
            let material = registry::assemble_planner_material(&active, &self.registry);
            let revision = state.cp.plan.as_ref().map_or(0, |p| p.revision + 1);
            let options = GenerateOptions {
                revision,
                failure_context: failure.clone(),
                created_at: self.clock.now(),
                max_repair_attempts: self.config.max_repair_attempts,
            };
            let scope = PlanScope { registry: &self.registry, active: &active, inventory: &inventory_keys };
            match planner::generate_plan(&self.gateway, &task, &material, &inventory, scope, &options) {
                Ok(plan) => return self.install_plan(state, plan, "replan"),
                Err(e) => {
                    let class = match &e {
                        PlanError::InvalidPlan(d) if planner::lacks_capability(d) => ErrorClass::MissingCapability,
                        PlanError::InvalidPlan(_) | PlanError::MalformedPlanDocument { .. } => ErrorClass::InvalidPlan,
                        PlanError::Gateway(g) => gateway_class(g),
                        PlanError::EmptyMaterial => ErrorClass::MissingCapability,
                    };
                    let action = classify_error(class, Phase::Planning, &e.to_string(), None, counters, budgets);
                    self.emit(state, EventKind::Recovery, None, json!({"kind": action.kind, "reason": action.reason, "phase": "planning"}))?;
                    match action.kind {
                        RecoveryKind::Replan => {
                            state.cp.replan_count += 1;
                            let previous = state.cp.plan.as_ref().map(planner::serialize_plan).unwrap_or_default();
                            failure = Some(format!("{previous}{e}"));
                        }
                        RecoveryKind::Reclassify => {
                            state.cp.reclassify_count += 1;
                            state.cp.active = None;
                        }
                        _ => return self.abort(state, &action.reason, WriteTag::Lifecycle),
                    }
                }
            }
        }
    }

    fn install_plan(&self, state: &mut SessionState, mut plan: ExecutionPlan, reason: &str) -> Result<(), EngineError> {
        let replaced = state.cp.plan.is_some();
        state.cp.cursor = 1;
        state.cp.attempt_counters.clear();
        state.cp.approved_step = None;
        state.cp.prepared = None;
        state.cp.pending_replan = None;
        if self.config.planning_mode {
            state.cp.plan = Some(plan.clone());
            if replaced {
                self.emit(state, EventKind::PlanRevised, None, json!({"plan_id": plan.plan_id, "revision": plan.revision, "reason": reason}))?;
            }
            let payload = serde_json::to_value(&plan).expect("plan serializes");
            self.raise(state, InterruptKind::PlanApproval, payload)?;
        } else {
            plan.approved = true;
            state.cp.plan = Some(plan.clone());
            if replaced {
                self.emit(state, EventKind::PlanRevised, None, json!({"plan_id": plan.plan_id, "revision": plan.revision, "reason": reason}))?;
            }
            Self::set_status(state, SessionStatus::Running);
            self.checkpoint(state, WriteTag::Lifecycle)?;
        }
        Ok(())
    }

    fn raise(&self, state: &mut SessionState, kind: InterruptKind, payload: Value) -> Result<InterruptRequest, EngineError> {
        if let Some(p) = &state.cp.pending_interrupt {
            return Err(ApprovalError::InterruptAlreadyPending(p.interrupt_id.clone()).into());
        }
        state.cp.interrupt_counter += 1;
        let request = InterruptRequest {
            interrupt_id: approval::interrupt_id(&state.info.session_id, state.cp.interrupt_counter),
            session_id: state.info.session_id.clone(),
            kind,
            payload,
            raised_at: self.clock.now(),
        };
        state.cp.pending_interrupt = Some(request.clone());
        if kind != InterruptKind::MemoryWrite && state.cp.status == SessionStatus::Running {
            Self::set_status(state, SessionStatus::SuspendedInterrupt);
        }
        let step = match kind {
            InterruptKind::StepApproval => Some(state.cp.cursor),
            _ => None,
        };
        self.emit(state, EventKind::InterruptRaised, step, json!({"interrupt_id": request.interrupt_id, "kind": kind}))?;
        self.checkpoint(state, WriteTag::Interrupt)?;
        Ok(request)
    }

    /// Asks the operator before a memory entry is persisted.
    pub fn request_memory_write(&self, id: &str, text: &str, tags: Vec<String>) -> Result<InterruptRequest, EngineError> {
        let handle = self.state(id)?;
        let mut state = handle.lock();
        let entry = MemoryEntry { user_id: state.info.user_id.clone(), text: text.into(), tags, created_at: self.clock.now() };
        if entry.text.trim().is_empty() {
            return Err(EngineError::InvalidInput("memory text is empty".into()));
        }
        let payload = serde_json::to_value(&entry).expect("entry serializes");
        self.raise(&mut state, InterruptKind::MemoryWrite, payload)
    }

    // ---- decisions -----------------------------------------------------------

    pub fn pending_interrupt(&self, id: &str) -> Result<Option<InterruptRequest>, EngineError> {
        Ok(self.checkpoint_of(id)?.pending_interrupt)
    }

    /// Applies an operator decision. Does not run the session; call
    /// [`Engine::drive`] afterwards.
    pub fn resolve(&self, decision: ApprovalDecision) -> Result<DecisionOutcome, EngineError> {
        let id = approval::session_of(&decision.interrupt_id)
            .ok_or_else(|| ApprovalError::UnknownInterrupt(decision.interrupt_id.clone()))?
            .to_string();
        let handle = match self.state(&id) {
            Ok(h) => h,
            Err(EngineError::UnknownSession(_)) => {
                return Err(ApprovalError::UnknownInterrupt(decision.interrupt_id.clone()).into())
            }
            Err(e) => return Err(e),
        };
        let mut state = handle.lock();
        self.resolve_locked(&mut state, decision)
    }

    fn resolve_locked(&self, state: &mut SessionState, decision: ApprovalDecision) -> Result<DecisionOutcome, EngineError> {
        let audit = AuditLog::new(&self.session_dir(&state.info.session_id));
        let pending = match &state.cp.pending_interrupt {
            Some(p) if p.interrupt_id == decision.interrupt_id => p.clone(),
            _ => {
                return match audit.find(&decision.interrupt_id)? {
                    Some(prev)
                        if decision.request_id.is_some() && prev.decision.request_id == decision.request_id =>
                    {
                        Ok(DecisionOutcome {
                            interrupt_id: prev.decision.interrupt_id,
                            verdict: prev.decision.verdict,
                            status: state.cp.status,
                            pending_interrupt: state.cp.pending_interrupt.clone(),
                        })
                    }
                    Some(_) => Err(ApprovalError::AlreadyResolved(decision.interrupt_id).into()),
                    None if decision.interrupt_id.starts_with(&format!("{}-int-", state.info.session_id))
                        && state.cp.interrupt_counter > 0 =>
                    {
                        let n: Option<u32> = decision.interrupt_id.rsplit('-').next().and_then(|s| s.parse().ok());
                        match n {
                            Some(n) if n <= state.cp.interrupt_counter => {
                                Err(ApprovalError::AlreadyResolved(decision.interrupt_id).into())
                            }
                            _ => Err(ApprovalError::UnknownInterrupt(decision.interrupt_id).into()),
                        }
                    }
                    None => Err(ApprovalError::UnknownInterrupt(decision.interrupt_id).into()),
                };
            }
        };
        decision.check(pending.kind)?;

        // Validate an edit before anything is recorded.
        let revised = match (pending.kind, decision.verdict) {
            (InterruptKind::PlanApproval, Verdict::Edit) => {
                let doc = match decision.edited_payload.as_ref().expect("checked") {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                let plan = state.cp.plan.clone().expect("plan approval has a plan");
                let active = state.cp.active.clone().unwrap_or_else(|| {
                    registry::ActiveCapabilitySet::from_results(plan.task_hash.clone(), Vec::new())
                });
                let inventory: BTreeSet<ContextKey> =
                    self.contexts.inventory(&state.info.session_id)?.into_iter().map(|e| e.key).collect();
                let scope = PlanScope { registry: &self.registry, active: &active, inventory: &inventory };
                match planner::revise_plan(&plan, &doc, scope) {
                    Ok(p) => Some(p),
                    Err(PlanError::InvalidPlan(d)) => return Err(ApprovalError::InvalidEdit(d).into()),
                    Err(e) => return Err(ApprovalError::MalformedDecision(e.to_string()).into()),
                }
            }
            _ => None,
        };
        let memory_entry = match (pending.kind, decision.verdict) {
            (InterruptKind::MemoryWrite, Verdict::Approve) => Some(pending.payload.clone()),
            (InterruptKind::MemoryWrite, Verdict::Edit) => decision.edited_payload.clone(),
            _ => None,
        }
        .map(|v| {
            serde_json::from_value::<MemoryEntry>(v)
                .map_err(|e| EngineError::from(ApprovalError::MalformedDecision(format!("memory entry: {e}"))))
        })
        .transpose()?;
        if let Some(entry) = &memory_entry {
            if entry.user_id != state.info.user_id || entry.text.trim().is_empty() {
                return Err(ApprovalError::MalformedDecision("memory entry must keep its user and have text".into()).into());
            }
        }

        let outcome_status = match decision.verdict {
            Verdict::Reject if pending.kind != InterruptKind::MemoryWrite => SessionStatus::Aborted,
            _ => match pending.kind {
                InterruptKind::MemoryWrite => state.cp.status,
                InterruptKind::PlanApproval if revised.is_some() => state.cp.status,
                _ => SessionStatus::Running,
            },
        };
        if audit.find(&pending.interrupt_id)?.is_none() {
            audit.append(&AuditRecord { decision: decision.clone(), kind: pending.kind, outcome: outcome_status.as_str().into() })?;
        }

        state.cp.pending_interrupt = None;
        let step = (pending.kind == InterruptKind::StepApproval).then_some(state.cp.cursor);
        self.emit(
            state,
            EventKind::InterruptResolved,
            step,
            json!({"interrupt_id": pending.interrupt_id, "verdict": decision.verdict, "decided_by": decision.decided_by}),
        )?;

        match (pending.kind, decision.verdict) {
            (InterruptKind::MemoryWrite, _) => {
                if let Some(entry) = memory_entry {
                    self.memory.append(&entry)?;
                }
                self.checkpoint(state, WriteTag::Resolution)?;
            }
            (_, Verdict::Reject) => {
                state.cp.prepared = None;
                self.abort(state, OPERATOR_REJECTION, WriteTag::Resolution)?;
            }
            (InterruptKind::PlanApproval, Verdict::Edit) => {
                let plan = revised.expect("validated above");
                state.cp.plan = Some(plan.clone());
                self.emit(state, EventKind::PlanRevised, None, json!({"plan_id": plan.plan_id, "revision": plan.revision, "reason": "operator edit"}))?;
                let payload = serde_json::to_value(&plan).expect("plan serializes");
                self.raise(state, InterruptKind::PlanApproval, payload)?;
            }
            (InterruptKind::PlanApproval, _) => {
                if let Some(plan) = state.cp.plan.as_mut() {
                    plan.approved = true;
                }
                Self::set_status(state, SessionStatus::Running);
                self.checkpoint(state, WriteTag::Resolution)?;
            }
            (InterruptKind::StepApproval, _) => {
                state.cp.approved_step = Some(state.cp.cursor);
                Self::set_status(state, SessionStatus::Running);
                self.checkpoint(state, WriteTag::Resolution)?;
            }
        }
        Ok(DecisionOutcome {
            interrupt_id: decision.interrupt_id,
            verdict: decision.verdict,
            status: state.cp.status,
            pending_interrupt: state.cp.pending_interrupt.clone(),
        })
    }

    /// Operator edit of the plan awaiting approval.
    pub fn revise_plan(
        &self,
        id: &str,
        document: Value,
        decided_by: &str,
        request_id: Option<String>,
    ) -> Result<DecisionOutcome, EngineError> {
        let handle = self.state(id)?;
        let mut state = handle.lock();
        let pending = match &state.cp.pending_interrupt {
            Some(p) if p.kind == InterruptKind::PlanApproval => p.clone(),
            _ => return Err(EngineError::Conflict(format!("session {id} has no plan awaiting approval"))),
        };
        let mut decision = ApprovalDecision::new(pending.interrupt_id, Verdict::Edit, decided_by, self.clock.now()).with_edit(document);
        decision.request_id = request_id;
        self.resolve_locked(&mut state, decision)
    }

    fn auto_resolve(&self, state: &mut SessionState) -> Result<(), EngineError> {
        while let Some(p) = state.cp.pending_interrupt.clone() {
            if p.kind == InterruptKind::MemoryWrite {
                break;
            }
            let decision = ApprovalDecision::new(p.interrupt_id, Verdict::Approve, AUTO_APPROVER, self.clock.now());
            self.resolve_locked(state, decision)?;
        }
        Ok(())
    }

    // ---- execution -------------------------------------------------------------

    /// Runs the session until it completes, aborts or waits for a decision.
    pub fn drive(&self, id: &str) -> Result<SessionStatus, EngineError> {
        let handle = self.state(id)?;
        let mut state = handle.lock();
        self.run_loop(&mut state)
    }

    /// Reloads the session from its checkpoint and continues it.
    pub fn resume(&self, id: &str) -> Result<SessionStatus, EngineError> {
        let existing = self.sessions.lock().get(id).cloned();
        let handle = match existing {
            Some(h) => h,
            None => return self.drive(id),
        };
        let mut state = handle.lock();
        *state = self.load_state(id)?;
        self.run_loop(&mut state)
    }

    fn run_loop(&self, state: &mut SessionState) -> Result<SessionStatus, EngineError> {
        loop {
            if self.config.auto_approve {
                self.auto_resolve(state)?;
            }
            if state.cp.status != SessionStatus::Running || state.cp.pending_interrupt.is_some() {
                return Ok(state.cp.status);
            }
            if let Some(failure) = state.cp.pending_replan.clone() {
                self.plan_phase(state, Some(failure))?;
                continue;
            }
            let plan = state.cp.plan.clone().expect("running session has a plan");
            let cursor = state.cp.cursor;
            let Some(step) = plan.step(cursor).cloned() else {
                let keys: Vec<String> = self.contexts.inventory(&state.info.session_id)?.iter().map(|e| e.key.to_string()).collect();
                Self::set_status(state, SessionStatus::Completed);
                self.emit(state, EventKind::SessionCompleted, None, json!({"steps": plan.steps.len(), "context": keys}))?;
                self.checkpoint(state, WriteTag::Lifecycle)?;
                return Ok(SessionStatus::Completed);
            };
            let attempt = state.cp.attempt_counters.get(&cursor).copied().unwrap_or(0);
            let capability = match self.registry.get(&step.capability) {
                Some(c) => c.clone(),
                None => {
                    let err = ProviderError::Permanent(format!("capability {} is not registered", step.capability));
                    self.handle_step_failure(state, &plan, cursor, err)?;
                    continue;
                }
            };
            let inputs = match executor::resolve_inputs(&self.contexts, &state.info.session_id, &step) {
                Ok(i) => i,
                Err(err) => {
                    self.handle_step_failure(state, &plan, cursor, err)?;
                    continue;
                }
            };
            let task = state.cp.task.clone();
            let prepared = state.cp.prepared.clone();
            let session_id = state.info.session_id.clone();
            let ctx = ProviderContext {
                session_id: &session_id,
                step: &step,
                plan_revision: plan.revision,
                attempt,
                task: task.as_ref(),
                inputs: &inputs,
                gateway: &self.gateway,
                clock: self.clock.as_ref(),
                scripts: &self.scripts,
                prepared: prepared.as_ref(),
                max_repair_attempts: self.config.max_repair_attempts,
                verify: self.config.verify,
            };

            if capability.requires_approval && state.cp.approved_step != Some(cursor) {
                let rendering = match self.providers.prepare(&capability.provider, &ctx) {
                    Ok(r) => r,
                    Err(err) => {
                        self.handle_step_failure(state, &plan, cursor, err)?;
                        continue;
                    }
                };
                state.cp.prepared = rendering.clone();
                let payload = json!({
                    "plan_id": plan.plan_id,
                    "revision": plan.revision,
                    "step": step,
                    "rendering": rendering,
                });
                self.raise(state, InterruptKind::StepApproval, payload)?;
                continue;
            }

            self.emit(
                state,
                EventKind::StepStarted,
                Some(cursor),
                json!({"capability": step.capability, "objective": step.objective, "attempt": attempt + 1, "revision": plan.revision}),
            )?;
            match executor::execute_step(&self.providers, &capability, &ctx) {
                Ok(out) => {
                    let key = match self.contexts.put_context(&session_id, out.object) {
                        Ok(k) => k,
                        Err(e) => {
                            self.handle_step_failure(state, &plan, cursor, ProviderError::Contract(e.to_string()))?;
                            continue;
                        }
                    };
                    let mut ids = Vec::new();
                    for draft in &out.artifacts {
                        ids.push(self.artifacts.put_artifact(&session_id, cursor, draft, self.clock.now())?.artifact_id);
                    }
                    self.emit(
                        state,
                        EventKind::StepSucceeded,
                        Some(cursor),
                        json!({"output": key, "summary": out.summary, "artifacts": ids}),
                    )?;
                    state.cp.cursor += 1;
                    state.cp.approved_step = None;
                    state.cp.prepared = None;
                    self.checkpoint(state, WriteTag::StepOutcome)?;
                }
                Err(err) => self.handle_step_failure(state, &plan, cursor, err)?,
            }
        }
    }

    fn handle_step_failure(
        &self,
        state: &mut SessionState,
        plan: &ExecutionPlan,
        index: u32,
        err: ProviderError,
    ) -> Result<(), EngineError> {
        let class = err.class();
        let detail = err.to_string();
        let attempts = state.cp.attempt_counters.get(&index).copied().unwrap_or(0);
        self.emit(state, EventKind::StepFailed, Some(index), json!({"class": class, "detail": detail}))?;
        let counters = Counters { attempts, replans: state.cp.replan_count, reclassifies: state.cp.reclassify_count };
        let action = classify_error(class, Phase::Execution, &detail, Some(index), counters, self.config.budgets);
        self.emit(state, EventKind::Recovery, Some(index), json!({"kind": action.kind, "reason": action.reason, "phase": "execution"}))?;
        let failure = || {
            format!(
                "{}Step {index} ({}) failed: {detail}\n",
                planner::serialize_plan(plan),
                plan.step(index).map_or("?", |s| s.capability.as_str())
            )
        };
        match action.kind {
            RecoveryKind::Retry => {
                state.cp.attempt_counters.insert(index, attempts + 1);
                self.checkpoint(state, WriteTag::StepOutcome)?;
                std::thread::sleep(self.config.backoff.delay(attempts + 1));
            }
            RecoveryKind::Replan => {
                state.cp.replan_count += 1;
                state.cp.approved_step = None;
                state.cp.prepared = None;
                state.cp.pending_replan = Some(failure());
                self.checkpoint(state, WriteTag::StepOutcome)?;
            }
            RecoveryKind::Reclassify => {
                state.cp.reclassify_count += 1;
                state.cp.active = None;
                state.cp.approved_step = None;
                state.cp.prepared = None;
                state.cp.pending_replan = Some(failure());
                self.checkpoint(state, WriteTag::StepOutcome)?;
            }
            RecoveryKind::Abort => self.abort(state, &action.reason, WriteTag::StepOutcome)?,
        }
        Ok(())
    }

    // ---- export --------------------------------------------------------------

    /// Deterministic archive of a terminal session.
    pub fn export_bundle(&self, id: &str) -> Result<Vec<u8>, EngineError> {
        let cp = self.checkpoint_of(id)?;
        if !cp.status.is_terminal() {
            return Err(EngineError::NotTerminal(id.into()));
        }
        let dir = self.session_dir(id);
        let log = EventLog::new(&dir);
        let events = log.read_all().map_err(io_err)?;
        let events_bytes = fs::read(log.path()).unwrap_or_default();
        let artifacts = self.artifacts.list(id)?;

        let mut bundle = BundleBuilder::default();
        let index: Vec<Value> = artifacts
            .iter()
            .map(|a| {
                json!({
                    "artifact_id": a.artifact_id, "step_index": a.step_index, "kind": a.kind,
                    "media_type": a.media_type, "label": a.label, "path": a.bundle_path(),
                })
            })
            .collect();
        let manifest = json!({
            "session_id": id,
            "status": cp.status,
            "abort_reason": cp.abort_reason,
            "task": cp.task,
            "plan": cp.plan,
            "events": events,
            "artifacts": index,
        });
        bundle.add("manifest.json", canonical::to_canonical_pretty(&manifest).map_err(io_err)?);
        if let Some(plan) = &cp.plan {
            bundle.add("plan.json", planner::serialize_plan(plan));
        }
        bundle.add("events.jsonl", events_bytes);
        bundle.add("context.json", canonical::to_canonical_pretty(&cp.context).map_err(io_err)?);
        for a in &artifacts {
            bundle.add(a.bundle_path(), self.artifacts.read_blob(&a.artifact_id)?);
        }
        bundle.add("report.md", run_report(&cp, &events, &artifacts));
        Ok(bundle.finish())
    }

    pub fn write_bundle(&self, id: &str, path: &Path) -> Result<(), EngineError> {
        let bytes = self.export_bundle(id)?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        write_atomic(path, &bytes).map_err(io_err)
    }
}

/// Human-readable run report, one section per plan step.
fn run_report(cp: &Checkpoint, events: &[ExecutionEvent], artifacts: &[Artifact]) -> String {
    let mut out = format!("# Run report: {}\n\nStatus: {}\n", cp.session_id, cp.status);
    if let Some(reason) = &cp.abort_reason {
        out.push_str(&format!("Abort reason: {reason}\n"));
    }
    if let Some(task) = &cp.task {
        out.push_str(&format!("Task: {}\n", task.statement));
    }
    let Some(plan) = &cp.plan else {
        out.push_str("\nNo plan was generated.\n");
        return out;
    };
    out.push_str(&format!("Plan: {} (revision {})\n", plan.plan_id, plan.revision));
    let n = plan.steps.len();
    // Outcomes of the final plan revision only.
    let last_revision_start = events
        .iter()
        .rposition(|e| e.kind == EventKind::PlanRevised)
        .map_or(0, |i| i + 1);
    for step in &plan.steps {
        out.push_str(&format!("\n## Step {}/{}: {}\n\n", step.index, n, step.capability));
        out.push_str(&format!("Objective: {}\n", step.objective));
        let inputs: Vec<String> = step.inputs.iter().map(ToString::to_string).collect();
        out.push_str(&format!("Inputs: {}\n", if inputs.is_empty() { "none".into() } else { inputs.join(", ") }));
        out.push_str(&format!("Output: {}\n", step.output));
        let mine = events[last_revision_start..].iter().filter(|e| e.step_index == Some(step.index));
        let mut status = "not run".to_string();
        let mut failures = 0;
        for e in mine {
            match e.kind {
                EventKind::StepSucceeded => {
                    status = format!("succeeded: {}", e.payload["summary"].as_str().unwrap_or(""));
                }
                EventKind::StepFailed => {
                    failures += 1;
                    status = format!("failed: {}", e.payload["detail"].as_str().unwrap_or(""));
                }
                _ => {}
            }
        }
        out.push_str(&format!("Result: {status}\n"));
        if failures > 0 {
            out.push_str(&format!("Failed attempts: {failures}\n"));
        }
        for a in artifacts.iter().filter(|a| a.step_index == step.index) {
            out.push_str(&format!("Artifact: {} ({}) {}\n", a.label, a.kind.as_str(), a.bundle_path()));
        }
    }
    out
}
