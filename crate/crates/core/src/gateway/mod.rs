//! Boundary to language models.
//!
//! [`Gateway`] wraps one [`LmBackend`] (the OpenAI-compatible HTTP client or
//! the deterministic scripted backend) and adds structured-output enforcement:
//! the schema is embedded in the prompt, the reply is parsed and validated, and
//! failures are answered with a bounded number of repair turns. The gateway
//! never retries transport failures; that policy belongs to the executor.

mod openai;
mod scripted;

pub use openai::{OpenAiBackend, OpenAiConfig};
pub use scripted::{ScriptEntry, ScriptFixture, ScriptedBackend};

use crate::schema::SchemaDescriptor;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Extraction,
    Classification,
    Planning,
    Codegen,
    Response,
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Purpose::Extraction => "extraction",
            Purpose::Classification => "classification",
            Purpose::Planning => "planning",
            Purpose::Codegen => "codegen",
            Purpose::Response => "response",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub text: String,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        ChatMessage { role: ChatRole::System, text: text.into() }
    }
    pub fn user(text: impl Into<String>) -> Self {
        ChatMessage { role: ChatRole::User, text: text.into() }
    }
    pub fn assistant(text: impl Into<String>) -> Self {
        ChatMessage { role: ChatRole::Assistant, text: text.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding { temperature: 0.2, max_tokens: 4096 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub purpose: Purpose,
    pub messages: Vec<ChatMessage>,
    pub output_schema: Option<SchemaDescriptor>,
    pub decoding: Decoding,
}

impl PromptRequest {
    pub fn new(purpose: Purpose, messages: Vec<ChatMessage>) -> Self {
        PromptRequest { purpose, messages, output_schema: None, decoding: Decoding::default() }
    }

    /// Attaches an output schema; structured requests always decode at temperature 0.
    pub fn with_schema(mut self, schema: SchemaDescriptor) -> Self {
        self.output_schema = Some(schema);
        self.decoding.temperature = 0.0;
        self
    }

    pub fn last_user_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.text.as_str())
    }

    /// Concatenation of every message; used by tests that scan prompts.
    pub fn transcript(&self) -> String {
        self.messages.iter().map(|m| m.text.as_str()).collect::<Vec<_>>().join("\n")
    }

    fn check(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("request has no messages".into()));
        }
        if self.decoding.temperature.is_nan() || self.decoding.temperature < 0.0 || self.decoding.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("invalid decoding settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub structured: Option<Value>,
    pub usage: Usage,
    pub backend: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    /// Transport-level failure; transient from the executor's point of view.
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    /// Authentication or quota refusal; fatal.
    #[error("backend rejected request: {0}")]
    BackendRejected(String),
    #[error("structured output failed after {attempts} attempt(s): {last_error}")]
    StructuredOutputFailure { attempts: u32, last_error: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

pub trait LmBackend: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn complete(&self, request: &PromptRequest) -> Result<Completion, GatewayError>;
}

#[derive(Debug, Clone)]
pub struct Gateway {
    backend: Arc<dyn LmBackend>,
    calls: Arc<AtomicU64>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn LmBackend>) -> Self {
        Gateway { backend, calls: Arc::new(AtomicU64::new(0)) }
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    /// Number of backend calls issued through this gateway (and its clones).
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, request: &PromptRequest) -> Result<Completion, GatewayError> {
        request.check()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.backend.complete(request)
    }

    pub fn complete_structured(
        &self,
        request: &PromptRequest,
        max_repair_attempts: u32,
    ) -> Result<Completion, GatewayError> {
        self.complete_structured_with(request, max_repair_attempts, |_| Ok(()))
    }

    /// Structured completion with an extra semantic check run after schema
    /// validation. Issues at most `1 + max_repair_attempts` backend calls.
    pub fn complete_structured_with(
        &self,
        request: &PromptRequest,
        max_repair_attempts: u32,
        check: impl Fn(&Value) -> Result<(), String>,
    ) -> Result<Completion, GatewayError> {
        let schema = request
            .output_schema
            .clone()
            .ok_or_else(|| GatewayError::InvalidRequest("structured completion needs an output schema".into()))?;
        let original_ask = request
            .last_user_text()
            .ok_or_else(|| GatewayError::InvalidRequest("request has no user message".into()))?
            .to_string();

        let mut working = request.clone();
        working.decoding.temperature = 0.0;
        working.messages.insert(0, ChatMessage::system(schema_instruction(&schema)));

        let mut attempts = 0;
        loop {
            attempts += 1;
            let mut completion = self.complete(&working)?;
            let outcome = parse_json_reply(&completion.text).and_then(|value| {
                schema.validate(&value).map_err(|v| format!("schema violation at {v}"))?;
                check(&value)?;
                Ok(value)
            });
            match outcome {
                Ok(value) => {
                    completion.structured = Some(value);
                    return Ok(completion);
                }
                Err(error) if attempts <= max_repair_attempts => {
                    working.messages.push(ChatMessage::assistant(completion.text));
                    working.messages.push(ChatMessage::user(format!(
                        "Your previous reply could not be used: {error}. \
                         Reply again with only a JSON object matching the schema.\n\n{original_ask}"
                    )));
                }
                Err(error) => {
                    return Err(GatewayError::StructuredOutputFailure { attempts, last_error: error })
                }
            }
        }
    }
}

fn schema_instruction(schema: &SchemaDescriptor) -> String {
    format!(
        "Reply with a single JSON object and nothing else. It must match this schema \
         (field: type):\n{}",
        schema.describe()
    )
}

/// Pulls a JSON object out of a model reply, tolerating code fences and
/// surrounding prose.
pub fn parse_json_reply(text: &str) -> Result<Value, String> {
    let trimmed = text.trim();
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        return Ok(v);
    }
    let start = trimmed.find('{').ok_or("reply contains no JSON object")?;
    let end = trimmed.rfind('}').ok_or("reply contains no JSON object")?;
    if end < start {
        return Err("reply contains no JSON object".into());
    }
    serde_json::from_str(&trimmed[start..=end]).map_err(|e| format!("reply is not valid JSON: {e}"))
}

/// Extracts the body of the first fenced code block, or the whole text.
pub fn extract_code_block(text: &str) -> String {
    let mut lines = text.lines();
    let mut body = Vec::new();
    let mut inside = false;
    for line in lines.by_ref() {
        if line.trim_start().starts_with("```") {
            if inside {
                return body.join("\n") + "\n";
            }
            inside = true;
            continue;
        }
        if inside {
            body.push(line);
        }
    }
    if inside {
        body.join("\n") + "\n"
    } else {
        text.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{Field, FieldType};
    use proptest::prelude::*;

    fn verdict_schema() -> SchemaDescriptor {
        SchemaDescriptor::new(vec![
            Field::new("relevant", FieldType::Boolean),
            Field::new("rationale", FieldType::Text),
        ])
    }

    fn scripted(responses: &[&str]) -> (Gateway, Arc<ScriptedBackend>) {
        let backend = Arc::new(ScriptedBackend::new());
        backend
            .register_script(Purpose::Classification, "is it relevant", responses.iter().map(|s| s.to_string()).collect())
            .unwrap();
        (Gateway::new(backend.clone()), backend)
    }

    fn request() -> PromptRequest {
        PromptRequest::new(Purpose::Classification, vec![ChatMessage::user("Question: is it relevant?")])
            .with_schema(verdict_schema())
    }

    #[test]
    fn valid_reply_takes_one_call() {
        let (gw, _) = scripted(&[r#"{"relevant": true, "rationale": "yes"}"#]);
        let c = gw.complete_structured(&request(), 2).unwrap();
        assert_eq!(c.structured.unwrap()["relevant"], true);
        assert_eq!(gw.call_count(), 1);
    }

    #[test]
    fn repair_turn_recovers() {
        let (gw, backend) = scripted(&["not json", r#"```json
{"relevant": false, "rationale": "no"}
```"#]);
        let c = gw.complete_structured(&request(), 1).unwrap();
        assert_eq!(c.structured.unwrap()["relevant"], false);
        assert_eq!(gw.call_count(), 2);
        let seen = backend.requests();
        let repair = seen[1].last_user_text().unwrap();
        assert!(repair.contains("could not be used"));
        assert!(repair.contains("is it relevant"));
    }

    #[test]
    fn budget_exhaustion_fails() {
        let (gw, _) = scripted(&[r#"{"relevant": "maybe"}"#, "{}"]);
        let err = gw.complete_structured(&request(), 1).unwrap_err();
        assert!(matches!(err, GatewayError::StructuredOutputFailure { attempts: 2, .. }));
        assert_eq!(gw.call_count(), 2);
    }

    #[test]
    fn semantic_check_feeds_repair_loop() {
        let (gw, _) = scripted(&[
            r#"{"relevant": true, "rationale": ""}"#,
            r#"{"relevant": true, "rationale": "because"}"#,
        ]);
        let c = gw
            .complete_structured_with(&request(), 1, |v| {
                if v["rationale"].as_str().unwrap_or("").is_empty() {
                    Err("rationale must not be empty".into())
                } else {
                    Ok(())
                }
            })
            .unwrap();
        assert_eq!(c.structured.unwrap()["rationale"], "because");
    }

    #[test]
    fn structured_requires_schema_and_messages() {
        let (gw, _) = scripted(&["{}"]);
        let plain = PromptRequest::new(Purpose::Classification, vec![ChatMessage::user("is it relevant")]);
        assert!(matches!(gw.complete_structured(&plain, 0), Err(GatewayError::InvalidRequest(_))));
        let empty = PromptRequest::new(Purpose::Classification, vec![]);
        assert!(matches!(gw.complete(&empty), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn with_schema_forces_temperature_zero() {
        let r = PromptRequest::new(Purpose::Planning, vec![ChatMessage::user("x")]).with_schema(verdict_schema());
        assert_eq!(r.decoding.temperature, 0.0);
    }

    #[test]
    fn code_block_extraction() {
        assert_eq!(extract_code_block("hi\n```python\nprint(1)\n```\nbye"), "print(1)\n");
        assert_eq!(extract_code_block("print(2)"), "print(2)");
    }

    proptest! {
        // Whatever the backend says, a structured value is only ever handed
        // out when it validates.
        #[test]
        fn structured_values_always_validate(
            replies in proptest::collection::vec(
                prop_oneof![
                    Just(r#"{"relevant": true, "rationale": "ok"}"#.to_string()),
                    Just(r#"{"relevant": 1, "rationale": "bad"}"#.to_string()),
                    Just(r#"{"rationale": "missing"}"#.to_string()),
                    Just(r#"{"relevant": false, "rationale": "x", "extra": 1}"#.to_string()),
                    "[a-z{}\" :]{0,20}",
                ],
                1..5,
            ),
            budget in 0u32..4,
        ) {
            let backend = Arc::new(ScriptedBackend::new());
            backend.register_script(Purpose::Classification, "is it relevant", replies.clone()).unwrap();
            let gw = Gateway::new(backend);
            if let Ok(c) = gw.complete_structured(&request(), budget) {
                prop_assert!(verdict_schema().validate(c.structured.as_ref().unwrap()).is_ok());
            }
            prop_assert!(gw.call_count() <= 1 + budget as u64);
        }
    }
}
