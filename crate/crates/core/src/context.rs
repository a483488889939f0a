//! Typed execution context shared across plan steps, plus the conversation
//! and task records that feed extraction.

use crate::canonical;
use crate::schema::{SchemaDescriptor, SchemaViolation};
use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid identifier {raw:?}: {reason}")]
pub struct IdentifierError {
    pub raw: String,
    pub reason: &'static str,
}

/// Uppercases and maps separators to `_`, then enforces `[A-Z0-9_]+`.
pub fn normalize_identifier(raw: &str) -> Result<String, IdentifierError> {
    let normalized: String = raw
        .trim()
        .chars()
        .map(|c| match c {
            '-' | ' ' | '.' | '/' => '_',
            c => c.to_ascii_uppercase(),
        })
        .collect();
    if normalized.is_empty() {
        return Err(IdentifierError { raw: raw.into(), reason: "empty" });
    }
    if !normalized.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_') {
        return Err(IdentifierError {
            raw: raw.into(),
            reason: "allowed characters are A-Z, 0-9 and _",
        });
    }
    Ok(normalized)
}

/// Address of a context object: `(context_type, instance_key)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawContextKey")]
pub struct ContextKey {
    #[serde(rename = "type")]
    context_type: String,
    #[serde(rename = "key")]
    instance_key: String,
}

#[derive(Deserialize)]
struct RawContextKey {
    #[serde(rename = "type")]
    context_type: String,
    #[serde(rename = "key")]
    instance_key: String,
}

impl TryFrom<RawContextKey> for ContextKey {
    type Error = IdentifierError;
    fn try_from(raw: RawContextKey) -> Result<Self, Self::Error> {
        ContextKey::new(&raw.context_type, &raw.instance_key)
    }
}

impl ContextKey {
    pub fn new(context_type: &str, instance_key: &str) -> Result<Self, IdentifierError> {
        Ok(ContextKey {
            context_type: normalize_identifier(context_type)?,
            instance_key: normalize_identifier(instance_key)?,
        })
    }

    pub fn context_type(&self) -> &str {
        &self.context_type
    }

    pub fn instance_key(&self) -> &str {
        &self.instance_key
    }
}

impl fmt::Display for ContextKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.context_type, self.instance_key)
    }
}

/// Who produced a context object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Step(u32),
    User,
    ExternalSource,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Step(i) => write!(f, "step:{i}"),
            Provenance::User => f.write_str("user"),
            Provenance::ExternalSource => f.write_str("external-source"),
        }
    }
}

impl FromStr for Provenance {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "user" => Ok(Provenance::User),
            "external-source" => Ok(Provenance::ExternalSource),
            _ => s
                .strip_prefix("step:")
                .and_then(|n| n.parse().ok())
                .map(Provenance::Step)
                .ok_or_else(|| format!("unknown provenance {s:?}")),
        }
    }
}

impl Serialize for Provenance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextObject {
    #[serde(flatten)]
    pub key: ContextKey,
    pub schema: SchemaDescriptor,
    pub payload: Value,
    pub provenance: Provenance,
    pub created_at: DateTime<Utc>,
}

impl ContextObject {
    pub fn new(
        key: ContextKey,
        schema: SchemaDescriptor,
        payload: Value,
        provenance: Provenance,
        created_at: DateTime<Utc>,
    ) -> Self {
        ContextObject { key, schema, payload, provenance, created_at }
    }

    pub fn validate(&self) -> Result<(), SchemaViolation> {
        self.schema.validate(&self.payload)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InventoryEntry {
    pub key: ContextKey,
    pub schema: SchemaDescriptor,
    pub provenance: Provenance,
}

/// Checkpoint fragment: every stored object, ordered by key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ContextSnapshot {
    pub context: Vec<ContextObject>,
}

impl ContextSnapshot {
    pub fn to_canonical(&self) -> String {
        canonical::to_canonical_string(self).expect("context snapshot serializes")
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ContextError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("context key {0} already stored")]
    DuplicateKey(ContextKey),
    #[error("payload for {key} violates its schema: {violation}")]
    SchemaViolation { key: ContextKey, violation: SchemaViolation },
    #[error("context key {0} not found")]
    NotFound(ContextKey),
}

/// Context objects of one session. Objects are write-once.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionContext {
    objects: BTreeMap<ContextKey, ContextObject>,
}

impl SessionContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, object: ContextObject) -> Result<ContextKey, ContextError> {
        if self.objects.contains_key(&object.key) {
            return Err(ContextError::DuplicateKey(object.key));
        }
        object.validate().map_err(|violation| ContextError::SchemaViolation {
            key: object.key.clone(),
            violation,
        })?;
        let key = object.key.clone();
        self.objects.insert(key.clone(), object);
        Ok(key)
    }

    pub fn get(&self, key: &ContextKey) -> Result<&ContextObject, ContextError> {
        self.objects.get(key).ok_or_else(|| ContextError::NotFound(key.clone()))
    }

    pub fn contains(&self, key: &ContextKey) -> bool {
        self.objects.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn inventory(&self) -> Vec<InventoryEntry> {
        self.objects
            .values()
            .map(|o| InventoryEntry {
                key: o.key.clone(),
                schema: o.schema.clone(),
                provenance: o.provenance,
            })
            .collect()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ContextKey> {
        self.objects.keys()
    }

    /// First free instance key for `context_type`: `base`, then `base_2`, `base_3`, ...
    pub fn next_instance_key(&self, context_type: &str, base: &str) -> Result<ContextKey, IdentifierError> {
        let first = ContextKey::new(context_type, base)?;
        if !self.contains(&first) {
            return Ok(first);
        }
        (2u32..)
            .map(|n| ContextKey::new(context_type, &format!("{base}_{n}")))
            .find(|k| k.as_ref().map(|k| !self.contains(k)).unwrap_or(true))
            .expect("unbounded suffix search")
    }

    pub fn snapshot(&self) -> ContextSnapshot {
        ContextSnapshot { context: self.objects.values().cloned().collect() }
    }

    pub fn from_snapshot(snapshot: ContextSnapshot) -> Result<Self, ContextError> {
        let mut ctx = SessionContext::new();
        for object in snapshot.context {
            ctx.put(object)?;
        }
        Ok(ctx)
    }
}

/// Context for all sessions held by one process. Sessions are independent;
/// each carries its own lock so distinct sessions never contend.
#[derive(Debug, Default)]
pub struct ContextStore {
    sessions: RwLock<HashMap<String, Arc<RwLock<SessionContext>>>>,
}

impl ContextStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open_session(&self, session: &str) {
        self.sessions
            .write()
            .entry(session.to_string())
            .or_insert_with(|| Arc::new(RwLock::new(SessionContext::new())));
    }

    pub fn restore_session(&self, session: &str, snapshot: ContextSnapshot) -> Result<(), ContextError> {
        let ctx = SessionContext::from_snapshot(snapshot)?;
        self.sessions
            .write()
            .insert(session.to_string(), Arc::new(RwLock::new(ctx)));
        Ok(())
    }

    pub fn close_session(&self, session: &str) {
        self.sessions.write().remove(session);
    }

    fn session(&self, session: &str) -> Result<Arc<RwLock<SessionContext>>, ContextError> {
        self.sessions
            .read()
            .get(session)
            .cloned()
            .ok_or_else(|| ContextError::UnknownSession(session.to_string()))
    }

    pub fn put_context(&self, session: &str, object: ContextObject) -> Result<ContextKey, ContextError> {
        self.session(session)?.write().put(object)
    }

    pub fn get_context(&self, session: &str, key: &ContextKey) -> Result<ContextObject, ContextError> {
        match self.session(session) {
            Ok(ctx) => ctx.read().get(key).cloned(),
            Err(_) => Err(ContextError::NotFound(key.clone())),
        }
    }

    pub fn inventory(&self, session: &str) -> Result<Vec<InventoryEntry>, ContextError> {
        Ok(self.session(session)?.read().inventory())
    }

    pub fn snapshot(&self, session: &str) -> Result<ContextSnapshot, ContextError> {
        Ok(self.session(session)?.read().snapshot())
    }

    /// Runs `f` with shared access to one session's context.
    pub fn with_session<R>(&self, session: &str, f: impl FnOnce(&SessionContext) -> R) -> Result<R, ContextError> {
        Ok(f(&self.session(session)?.read()))
    }

    pub fn with_session_mut<R>(
        &self,
        session: &str,
        f: impl FnOnce(&mut SessionContext) -> R,
    ) -> Result<R, ContextError> {
        Ok(f(&mut self.session(session)?.write()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
    System,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::System => "system",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationMessage {
    pub role: Role,
    pub text: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("message timestamp {got} precedes previous message at {previous}")]
pub struct TimestampRegression {
    pub previous: DateTime<Utc>,
    pub got: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationHistory {
    pub session_id: String,
    messages: Vec<ConversationMessage>,
}

impl ConversationHistory {
    pub fn new(session_id: impl Into<String>) -> Self {
        ConversationHistory { session_id: session_id.into(), messages: Vec::new() }
    }

    pub fn push(&mut self, role: Role, text: impl Into<String>, timestamp: DateTime<Utc>) -> Result<(), TimestampRegression> {
        if let Some(last) = self.messages.last() {
            if timestamp < last.timestamp {
                return Err(TimestampRegression { previous: last.timestamp, got: timestamp });
            }
        }
        self.messages.push(ConversationMessage { role, text: text.into(), timestamp });
        Ok(())
    }

    pub fn messages(&self) -> &[ConversationMessage] {
        &self.messages
    }

    pub fn last_user_message(&self) -> Option<&ConversationMessage> {
        self.messages.iter().rev().find(|m| m.role == Role::User)
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

/// Ordering hint: `task` depends on `prerequisite` being done first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDependency {
    pub task: String,
    pub prerequisite: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedTask {
    pub statement: String,
    pub constraints: Vec<String>,
    pub dependencies: Vec<TaskDependency>,
    pub source_refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TaskError {
    #[error("task statement is empty")]
    EmptyStatement,
    #[error("dependency fragment {0:?} does not occur in the statement or constraints")]
    DanglingFragment(String),
}

impl ExtractedTask {
    pub fn new(statement: impl Into<String>) -> Self {
        ExtractedTask {
            statement: statement.into(),
            constraints: Vec::new(),
            dependencies: Vec::new(),
            source_refs: Vec::new(),
        }
    }

    /// Whether `fragment` occurs (case-insensitively) in the statement or a constraint.
    pub fn mentions(&self, fragment: &str) -> bool {
        let needle = fragment.trim().to_lowercase();
        !needle.is_empty()
            && std::iter::once(&self.statement)
                .chain(self.constraints.iter())
                .any(|t| t.to_lowercase().contains(&needle))
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.statement.trim().is_empty() {
            return Err(TaskError::EmptyStatement);
        }
        for dep in &self.dependencies {
            for fragment in [&dep.task, &dep.prerequisite] {
                if !self.mentions(fragment) {
                    return Err(TaskError::DanglingFragment(fragment.clone()));
                }
            }
        }
        Ok(())
    }

    /// Digest of the canonical serialization; links classification and plans.
    pub fn digest(&self) -> String {
        canonical::digest_of(self).expect("task serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{Field, FieldType};
    use chrono::TimeZone;
    use serde_json::json;

    fn ts() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2025, 8, 9, 0, 0, 0).unwrap()
    }

    fn series_object(kind: &str, rows: usize) -> ContextObject {
        let schema = SchemaDescriptor::new(vec![
            Field::new("timestamps", FieldType::series(FieldType::Timestamp)),
            Field::new("value", FieldType::series(FieldType::Real)),
        ]);
        let payload = json!({
            "timestamps": vec!["2025-07-26T00:00:00Z"; rows],
            "value": vec![1.5; rows],
        });
        ContextObject::new(ContextKey::new(kind, "raw").unwrap(), schema, payload, Provenance::Step(2), ts())
    }

    #[test]
    fn keys_normalize() {
        let k = ContextKey::new("turbine-data", "raw").unwrap();
        assert_eq!(k.context_type(), "TURBINE_DATA");
        assert_eq!(k.instance_key(), "RAW");
        assert!(ContextKey::new("", "RAW").is_err());
        assert!(ContextKey::new("TURBINE$", "RAW").is_err());
        assert!(serde_json::from_value::<ContextKey>(json!({"type": "a!", "key": "b"})).is_err());
    }

    #[test]
    fn put_get_and_duplicate() {
        let store = ContextStore::new();
        store.open_session("s1");
        let obj = series_object("TURBINE_DATA", 1680);
        let key = store.put_context("s1", obj.clone()).unwrap();
        assert_eq!(store.get_context("s1", &key).unwrap(), obj);
        assert_eq!(
            store.put_context("s1", obj.clone()),
            Err(ContextError::DuplicateKey(key.clone()))
        );
        assert_eq!(
            store.put_context("nope", obj),
            Err(ContextError::UnknownSession("nope".into()))
        );
    }

    #[test]
    fn missing_column_rejected_on_put() {
        let store = ContextStore::new();
        store.open_session("s1");
        let mut obj = series_object("TURBINE_DATA", 3);
        obj.payload.as_object_mut().unwrap().remove("timestamps");
        assert!(matches!(
            store.put_context("s1", obj),
            Err(ContextError::SchemaViolation { .. })
        ));
        assert!(store.inventory("s1").unwrap().is_empty());
    }

    #[test]
    fn fresh_session_lookup_is_not_found() {
        let store = ContextStore::new();
        store.open_session("fresh");
        let key = ContextKey::new("WEATHER_DATA", "RAW").unwrap();
        assert_eq!(store.get_context("fresh", &key), Err(ContextError::NotFound(key)));
        assert!(store.inventory("fresh").unwrap().is_empty());
        assert!(matches!(store.inventory("missing"), Err(ContextError::UnknownSession(_))));
    }

    #[test]
    fn snapshot_reload_is_byte_identical() {
        let mut ctx = SessionContext::new();
        ctx.put(series_object("WEATHER_DATA", 4)).unwrap();
        ctx.put(series_object("TURBINE_DATA", 4)).unwrap();
        let first = ctx.snapshot().to_canonical();
        let reloaded: ContextSnapshot = serde_json::from_str(&first).unwrap();
        let again = SessionContext::from_snapshot(reloaded).unwrap();
        assert_eq!(again, ctx);
        assert_eq!(again.snapshot().to_canonical(), first);
        assert_eq!(ctx.snapshot().to_canonical(), first);
    }

    #[test]
    fn snapshot_entry_shape() {
        let mut ctx = SessionContext::new();
        ctx.put(series_object("TIME_RANGE", 0)).unwrap();
        let v: Value = serde_json::from_str(&ctx.snapshot().to_canonical()).unwrap();
        let entry = &v["context"][0];
        for field in ["type", "key", "schema", "payload", "provenance", "created_at"] {
            assert!(entry.get(field).is_some(), "missing {field}");
        }
        assert_eq!(entry["provenance"], "step:2");
        assert_eq!(entry["created_at"], "2025-08-09T00:00:00Z");
    }

    #[test]
    fn instance_keys_get_suffixes() {
        let mut ctx = SessionContext::new();
        assert_eq!(ctx.next_instance_key("TURBINE_DATA", "RAW").unwrap().instance_key(), "RAW");
        ctx.put(series_object("TURBINE_DATA", 1)).unwrap();
        let second = ctx.next_instance_key("TURBINE_DATA", "RAW").unwrap();
        assert_eq!(second.instance_key(), "RAW_2");
        let mut obj = series_object("TURBINE_DATA", 1);
        obj.key = second;
        ctx.put(obj).unwrap();
        assert_eq!(ctx.next_instance_key("TURBINE_DATA", "RAW").unwrap().instance_key(), "RAW_3");
    }

    #[test]
    fn provenance_strings() {
        for p in [Provenance::Step(3), Provenance::User, Provenance::ExternalSource] {
            assert_eq!(p.to_string().parse::<Provenance>().unwrap(), p);
        }
        assert!("step:x".parse::<Provenance>().is_err());
    }

    #[test]
    fn history_timestamps_non_decreasing() {
        let mut h = ConversationHistory::new("s");
        h.push(Role::User, "a", ts()).unwrap();
        h.push(Role::Assistant, "b", ts()).unwrap();
        assert!(h.push(Role::User, "c", ts() - chrono::Duration::seconds(1)).is_err());
        assert_eq!(h.last_user_message().unwrap().text, "a");
    }

    #[test]
    fn task_dependency_fragments_must_be_mentioned() {
        let mut t = ExtractedTask::new("Analyze turbine performance and rank them by efficiency");
        t.constraints.push("past 2 weeks".into());
        t.dependencies.push(TaskDependency {
            task: "rank them by efficiency".into(),
            prerequisite: "analyze turbine performance".into(),
        });
        assert!(t.validate().is_ok());
        t.dependencies.push(TaskDependency { task: "order pizza".into(), prerequisite: "past 2 weeks".into() });
        assert_eq!(t.validate(), Err(TaskError::DanglingFragment("order pizza".into())));
        assert_eq!(ExtractedTask::new("  ").validate(), Err(TaskError::EmptyStatement));
    }
}
