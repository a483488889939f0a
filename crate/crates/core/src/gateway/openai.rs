//! OpenAI-compatible chat-completions client.

use super::{ChatRole, Completion, GatewayError, LmBackend, PromptRequest, Usage};
use serde::Deserialize;
use serde_json::json;
use std::time::Duration;

#[derive(Debug, Clone)]
pub struct OpenAiConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl OpenAiConfig {
    /// Reads `AB_LM_BASE_URL`, `AB_LM_API_KEY` and `AB_LM_MODEL`.
    pub fn from_env() -> Self {
        OpenAiConfig {
            base_url: std::env::var("AB_LM_BASE_URL").unwrap_or_else(|_| "https://api.openai.com/v1".into()),
            api_key: std::env::var("AB_LM_API_KEY").ok().filter(|k| !k.is_empty()),
            model: std::env::var("AB_LM_MODEL").unwrap_or_else(|_| "gpt-4o-mini".into()),
            timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Debug)]
pub struct OpenAiBackend {
    config: OpenAiConfig,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<ApiUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ApiMessage,
}

#[derive(Deserialize)]
struct ApiMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ApiUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::BackendUnavailable(format!("http client: {e}")))?;
        Ok(OpenAiBackend { config, client })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn body(&self, request: &PromptRequest) -> serde_json::Value {
        let messages: Vec<_> = request
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    ChatRole::System => "system",
                    ChatRole::User => "user",
                    ChatRole::Assistant => "assistant",
                };
                json!({"role": role, "content": m.text})
            })
            .collect();
        json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_tokens,
        })
    }
}

impl LmBackend for OpenAiBackend {
    fn name(&self) -> &str {
        "openai-compatible"
    }

    fn complete(&self, request: &PromptRequest) -> Result<Completion, GatewayError> {
        let mut call = self.client.post(self.endpoint()).json(&self.body(request));
        if let Some(key) = &self.config.api_key {
            call = call.bearer_auth(key);
        }
        let response = call
            .send()
            .map_err(|e| GatewayError::BackendUnavailable(format!("transport: {e}")))?;
        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 || status.as_u16() == 429 {
            let detail = response.text().unwrap_or_default();
            return Err(GatewayError::BackendRejected(format!("{status}: {detail}")));
        }
        if status.is_server_error() {
            return Err(GatewayError::BackendUnavailable(format!("server error {status}")));
        }
        if !status.is_success() {
            let detail = response.text().unwrap_or_default();
            return Err(GatewayError::BackendRejected(format!("{status}: {detail}")));
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|e| GatewayError::BackendUnavailable(format!("undecodable response: {e}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::BackendUnavailable("response carried no choices".into()))?;
        let usage = parsed
            .usage
            .map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens })
            .unwrap_or_default();
        Ok(Completion { text, structured: None, usage, backend: self.config.model.clone() })
    }
}
