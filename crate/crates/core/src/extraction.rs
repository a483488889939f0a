//! Conversation-to-task transformation: context compression, multi-source
//! integration and task formalization.

use crate::canonical;
use crate::context::{ConversationHistory, ExtractedTask, TaskDependency};
use crate::gateway::{ChatMessage, Gateway, GatewayError, PromptRequest, Purpose};
use crate::schema::{Field, FieldType, SchemaDescriptor};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub user_id: String,
    pub text: String,
    #[serde(default)]
    pub tags: Vec<String>,
    pub created_at: DateTime<Utc>,
}

impl MemoryEntry {
    /// Content-derived identifier, stable across processes.
    pub fn id(&self) -> String {
        let digest = canonical::digest_of(self).expect("memory entry serializes");
        format!("mem-{}", &digest[..12])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalRef {
    pub source: String,
    pub locator: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SourceBundle {
    pub memory: Vec<MemoryEntry>,
    pub knowledge_refs: Vec<String>,
    pub external_refs: Vec<ExternalRef>,
}

impl SourceBundle {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        for m in &self.memory {
            if m.text.trim().is_empty() {
                return Err(ExtractionError::InvalidSource(format!("memory entry {} has empty text", m.id())));
            }
        }
        for r in &self.external_refs {
            let name_ok = !r.source.is_empty()
                && r.source.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            let locator_ok = !r.locator.is_empty() && !r.locator.chars().any(|c| c.is_whitespace() || c.is_control());
            if !name_ok || !locator_ok {
                return Err(ExtractionError::InvalidSource(format!("malformed external ref {}:{}", r.source, r.locator)));
            }
        }
        Ok(())
    }

    /// Identifiers a task may cite in `source_refs`.
    pub fn known_ids(&self) -> BTreeSet<String> {
        self.memory
            .iter()
            .map(MemoryEntry::id)
            .chain(self.knowledge_refs.iter().cloned())
            .chain(self.external_refs.iter().map(|r| format!("{}:{}", r.source, r.locator)))
            .collect()
    }

    fn render(&self) -> String {
        let mut out = String::new();
        for m in &self.memory {
            out.push_str(&format!("[{}] (user memory) {}\n", m.id(), m.text));
        }
        for k in &self.knowledge_refs {
            out.push_str(&format!("[{k}] (knowledge base entry)\n"));
        }
        for r in &self.external_refs {
            out.push_str(&format!("[{}:{}] (external source)\n", r.source, r.locator));
        }
        out
    }
}

/// Line-delimited JSON memory files under `<data_dir>/memory/<user_id>.jsonl`.
#[derive(Debug, Clone)]
pub struct MemoryStore {
    root: PathBuf,
}

impl MemoryStore {
    pub fn new(data_dir: &Path) -> Self {
        MemoryStore { root: data_dir.join("memory") }
    }

    pub fn path_for(&self, user_id: &str) -> Result<PathBuf, ExtractionError> {
        if user_id.is_empty() || !user_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(ExtractionError::InvalidSource(format!("invalid user id {user_id:?}")));
        }
        Ok(self.root.join(format!("{user_id}.jsonl")))
    }

    pub fn load(&self, user_id: &str) -> Result<Vec<MemoryEntry>, ExtractionError> {
        let path = self.path_for(user_id)?;
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(ExtractionError::Io(e.to_string())),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| ExtractionError::Io(format!("{}: {e}", path.display()))))
            .collect()
    }

    /// Appends `entry` unless an entry with the same id is already present.
    /// Returns whether a line was written.
    pub fn append(&self, entry: &MemoryEntry) -> Result<bool, ExtractionError> {
        if entry.text.trim().is_empty() {
            return Err(ExtractionError::InvalidSource("memory entry text is empty".into()));
        }
        let id = entry.id();
        if self.load(&entry.user_id)?.iter().any(|e| e.id() == id) {
            return Ok(false);
        }
        let path = self.path_for(&entry.user_id)?;
        std::fs::create_dir_all(&self.root).map_err(|e| ExtractionError::Io(e.to_string()))?;
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| ExtractionError::Io(e.to_string()))?;
        let line = canonical::to_canonical_string(entry).expect("memory entry serializes");
        writeln!(file, "{line}").and_then(|_| file.sync_all()).map_err(|e| ExtractionError::Io(e.to_string()))?;
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExtractionError {
    #[error("compression budget must be positive")]
    InvalidBudget,
    #[error("conversation has no user message")]
    NoUserMessage,
    #[error("condensed context is empty")]
    EmptyContext,
    #[error("invalid source: {0}")]
    InvalidSource(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("memory store: {0}")]
    Io(String),
}

/// Result of formalization: a task, or a turn that carries no actionable request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum TaskOutcome {
    Task(ExtractedTask),
    EmptyTask { clarification: String },
}

pub const COMPRESS_MARKER: &str = "Condense the conversation into salient points.";
pub const EXTRACT_MARKER: &str = "Formalize the task described in this context:";

fn points_schema() -> SchemaDescriptor {
    SchemaDescriptor::new(vec![Field::new("points", FieldType::series(FieldType::Text))])
}

fn task_schema() -> SchemaDescriptor {
    SchemaDescriptor::new(vec![
        Field::new("actionable", FieldType::Boolean),
        Field::new("statement", FieldType::Text).optional(),
        Field::new("constraints", FieldType::series(FieldType::Text)),
        Field::new(
            "dependencies",
            FieldType::series(FieldType::Record(vec![
                Field::new("task", FieldType::Text),
                Field::new("prerequisite", FieldType::Text),
            ])),
        ),
        Field::new("source_refs", FieldType::series(FieldType::Text)),
        Field::new("clarification", FieldType::Text).optional(),
    ])
}

fn truncate_chars(text: &str, max: usize) -> String {
    text.chars().take(max).collect()
}

/// Condenses a conversation to at most `budget` characters. The latest user
/// message always leads the output verbatim (truncated only when it alone
/// exceeds the budget); salient points from one structured model call follow
/// in order for as long as they fit.
pub fn compress_history(
    gateway: &Gateway,
    history: &ConversationHistory,
    budget: usize,
    max_repair_attempts: u32,
) -> Result<String, ExtractionError> {
    if budget == 0 {
        return Err(ExtractionError::InvalidBudget);
    }
    let latest = history.last_user_message().ok_or(ExtractionError::NoUserMessage)?;
    let transcript: String = history
        .messages()
        .iter()
        .map(|m| format!("[{}] {}\n", m.role, m.text))
        .collect();
    let request = PromptRequest::new(
        Purpose::Extraction,
        vec![
            ChatMessage::system(
                "You condense multi-turn conversations for an orchestration engine. \
                 Keep objectives, constraints, implicit requirements and referenced data; \
                 drop greetings and redundancy.",
            ),
            ChatMessage::user(format!(
                "{COMPRESS_MARKER}\n\nConversation:\n{transcript}\nLatest user message:\n{}",
                latest.text
            )),
        ],
    )
    .with_schema(points_schema());
    let completion = gateway.complete_structured(&request, max_repair_attempts)?;
    let points: Vec<String> = completion
        .structured
        .as_ref()
        .and_then(|v| v["points"].as_array())
        .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
        .unwrap_or_default();

    let lead = latest.text.trim();
    let mut out = truncate_chars(lead, budget);
    let mut used = out.chars().count();
    for point in points {
        let line = format!("\n- {}", point.trim());
        let n = line.chars().count();
        if used + n > budget {
            break;
        }
        out.push_str(&line);
        used += n;
    }
    Ok(out)
}

/// Turns condensed context plus consulted sources into one structured task.
pub fn extract_task(
    gateway: &Gateway,
    condensed: &str,
    sources: &SourceBundle,
    max_repair_attempts: u32,
) -> Result<TaskOutcome, ExtractionError> {
    if condensed.trim().is_empty() {
        return Err(ExtractionError::EmptyContext);
    }
    sources.validate()?;
    let known = sources.known_ids();
    let rendered_sources = sources.render();
    let mut user = format!("{EXTRACT_MARKER}\n{condensed}\n");
    if !rendered_sources.is_empty() {
        user.push_str(&format!("\nAvailable sources (cite ids you used in source_refs):\n{rendered_sources}"));
    }
    let request = PromptRequest::new(
        Purpose::Extraction,
        vec![
            ChatMessage::system(
                "You turn conversational requests into explicit tasks: one objective statement, \
                 explicit constraints, and ordering dependencies given as (task fragment, \
                 prerequisite fragment) pairs quoted from the statement or constraints. \
                 If there is no actionable request, set actionable=false and write a clarification.",
            ),
            ChatMessage::user(user),
        ],
    )
    .with_schema(task_schema());

    let completion = gateway.complete_structured_with(&request, max_repair_attempts, |v| {
        if v["actionable"] != Value::Bool(true) {
            return Ok(());
        }
        let task = task_from_value(v);
        task.validate().map_err(|e| e.to_string())?;
        if let Some(bad) = task.source_refs.iter().find(|r| !known.contains(*r)) {
            return Err(format!("source_refs cites unknown id {bad:?}"));
        }
        Ok(())
    })?;
    let value = completion.structured.expect("structured completion carries a value");
    if value["actionable"] == Value::Bool(true) {
        Ok(TaskOutcome::Task(task_from_value(&value)))
    } else {
        let clarification = value["clarification"]
            .as_str()
            .filter(|s| !s.trim().is_empty())
            .unwrap_or("Could you describe what you would like me to do?")
            .to_string();
        Ok(TaskOutcome::EmptyTask { clarification })
    }
}

fn strings(v: &Value) -> Vec<String> {
    v.as_array()
        .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
        .unwrap_or_default()
}

fn task_from_value(v: &Value) -> ExtractedTask {
    ExtractedTask {
        statement: v["statement"].as_str().unwrap_or("").trim().to_string(),
        constraints: strings(&v["constraints"]),
        dependencies: v["dependencies"]
            .as_array()
            .map(|deps| {
                deps.iter()
                    .map(|d| TaskDependency {
                        task: d["task"].as_str().unwrap_or("").to_string(),
                        prerequisite: d["prerequisite"].as_str().unwrap_or("").to_string(),
                    })
                    .collect()
            })
            .unwrap_or_default(),
        source_refs: strings(&v["source_refs"]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::Role;
    use crate::gateway::ScriptedBackend;
    use chrono::TimeZone;
    use proptest::prelude::*;
    use serde_json::json;
    use std::sync::Arc;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2025, 8, 9, 0, 0, 0).unwrap()
    }

    fn gateway_with(entries: &[(&str, Vec<String>)]) -> Gateway {
        let b = Arc::new(ScriptedBackend::new());
        for (m, r) in entries {
            b.register_script(Purpose::Extraction, *m, r.clone()).unwrap();
        }
        Gateway::new(b)
    }

    #[test]
    fn single_message_keeps_objective() {
        let gw = gateway_with(&[(COMPRESS_MARKER, vec![json!({"points": ["wants a summary"]}).to_string()])]);
        let mut h = ConversationHistory::new("s");
        h.push(Role::User, "Summarize yesterday's alarms", t0()).unwrap();
        let out = compress_history(&gw, &h, 1000, 0).unwrap();
        assert!(out.starts_with("Summarize yesterday's alarms"));
        assert!(out.contains("- wants a summary"));
    }

    #[test]
    fn planted_requirement_survives_long_history() {
        let mut h = ConversationHistory::new("s");
        for i in 0..49 {
            let text = if i == 7 { "Remember: exclude turbine T-02 from all reports".to_string() } else { format!("chatter {i}") };
            let role = if i % 2 == 0 { Role::User } else { Role::Assistant };
            h.push(role, text, t0()).unwrap();
        }
        h.push(Role::User, "Now produce the weekly report", t0()).unwrap();
        assert_eq!(h.messages().len(), 50);
        let gw = gateway_with(&[(
            COMPRESS_MARKER,
            vec![json!({"points": ["exclude turbine T-02 from all reports", "weekly cadence"]}).to_string()],
        )]);
        let out = compress_history(&gw, &h, 200, 0).unwrap();
        assert!(out.contains("exclude turbine T-02"));
        assert!(out.starts_with("Now produce the weekly report"));
    }

    #[test]
    fn zero_budget_rejected() {
        let gw = gateway_with(&[]);
        let mut h = ConversationHistory::new("s");
        h.push(Role::User, "x", t0()).unwrap();
        assert_eq!(compress_history(&gw, &h, 0, 0), Err(ExtractionError::InvalidBudget));
    }

    proptest! {
        #[test]
        fn budget_and_recency(
            filler in proptest::collection::vec("[a-z ]{0,40}", 0..12),
            points in proptest::collection::vec("[a-zA-Z ]{0,60}", 0..8),
            token in "[A-Z]{6}",
            extra_budget in 0usize..300,
        ) {
            let mut h = ConversationHistory::new("s");
            for f in &filler {
                h.push(Role::User, f.clone(), t0()).unwrap();
                h.push(Role::Assistant, "ok", t0()).unwrap();
            }
            let last = format!("{token} please");
            h.push(Role::User, last.clone(), t0()).unwrap();
            let gw = gateway_with(&[(COMPRESS_MARKER, vec![json!({"points": points}).to_string()])]);
            let budget = last.chars().count() + extra_budget;
            let out = compress_history(&gw, &h, budget, 0).unwrap();
            prop_assert!(out.chars().count() <= budget);
            prop_assert!(out.contains(&token));
        }

        #[test]
        fn budget_holds_even_below_message_length(budget in 1usize..20) {
            let mut h = ConversationHistory::new("s");
            h.push(Role::User, "a fairly long request that exceeds tiny budgets", t0()).unwrap();
            let gw = gateway_with(&[(COMPRESS_MARKER, vec![json!({"points": ["p"]}).to_string()])]);
            let out = compress_history(&gw, &h, budget, 0).unwrap();
            prop_assert!(out.chars().count() <= budget);
        }
    }

    #[test]
    fn greeting_is_empty_task() {
        let gw = gateway_with(&[(
            EXTRACT_MARKER,
            vec![json!({"actionable": false, "constraints": [], "dependencies": [], "source_refs": [],
                        "clarification": "Hello! What would you like to analyze?"}).to_string()],
        )]);
        let out = extract_task(&gw, "hello", &SourceBundle::default(), 0).unwrap();
        assert_eq!(out, TaskOutcome::EmptyTask { clarification: "Hello! What would you like to analyze?".into() });
    }

    #[test]
    fn memory_reference_passes_through() {
        let entry = MemoryEntry { user_id: "op1".into(), text: "my farm is Farm-B".into(), tags: vec![], created_at: t0() };
        let id = entry.id();
        let gw = gateway_with(&[(
            EXTRACT_MARKER,
            vec![json!({"actionable": true, "statement": "Report output for Farm-B",
                        "constraints": [], "dependencies": [], "source_refs": [id]}).to_string()],
        )]);
        let sources = SourceBundle { memory: vec![entry], ..Default::default() };
        let TaskOutcome::Task(task) = extract_task(&gw, "report output for my farm", &sources, 0).unwrap() else {
            panic!("expected task")
        };
        assert_eq!(task.source_refs, vec![id]);
    }

    #[test]
    fn unknown_source_ref_and_dangling_dependency_trigger_repair() {
        let bad = json!({"actionable": true, "statement": "rank turbines", "constraints": [],
                         "dependencies": [{"task": "rank turbines", "prerequisite": "bake bread"}],
                         "source_refs": []});
        let bad_ref = json!({"actionable": true, "statement": "rank turbines", "constraints": [],
                             "dependencies": [], "source_refs": ["mem-000000000000"]});
        let good = json!({"actionable": true, "statement": "rank turbines", "constraints": [],
                          "dependencies": [], "source_refs": []});
        let gw = gateway_with(&[(EXTRACT_MARKER, vec![bad.to_string(), bad_ref.to_string(), good.to_string()])]);
        let out = extract_task(&gw, "rank turbines", &SourceBundle::default(), 2).unwrap();
        assert!(matches!(out, TaskOutcome::Task(_)));
        assert_eq!(gw.call_count(), 3);
    }

    #[test]
    fn memory_store_appends_once() {
        let dir = tempfile::tempdir().unwrap();
        let store = MemoryStore::new(dir.path());
        let entry = MemoryEntry { user_id: "op1".into(), text: "prefers kW".into(), tags: vec!["units".into()], created_at: t0() };
        assert!(store.append(&entry).unwrap());
        assert!(!store.append(&entry).unwrap());
        assert_eq!(store.load("op1").unwrap(), vec![entry]);
        assert!(store.load("nobody").unwrap().is_empty());
        assert!(store.path_for("../etc").is_err());
    }

    #[test]
    fn malformed_external_ref_rejected() {
        let sources = SourceBundle {
            external_refs: vec![ExternalRef { source: "scada".into(), locator: "has space".into() }],
            ..Default::default()
        };
        assert!(matches!(sources.validate(), Err(ExtractionError::InvalidSource(_))));
    }
}
