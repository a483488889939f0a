//! Deterministic replay backend.
//!
//! A script is registered under a fingerprint `(purpose, matcher)`. A request
//! matches when its purpose is equal and the matcher is a substring of its
//! final user message; when several scripts match, the longest matcher wins
//! (earliest registration breaks ties). Each script hands out its responses in
//! order and is exhausted afterwards.

use super::{Completion, GatewayError, LmBackend, PromptRequest, Purpose, Usage};
use crate::canonical;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub purpose: Purpose,
    pub matcher: String,
    pub responses: Vec<String>,
}

/// On-disk fixture format (`--lm-script <path>`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ScriptFixture {
    pub scripts: Vec<ScriptEntry>,
}

impl ScriptFixture {
    pub fn push(&mut self, purpose: Purpose, matcher: impl Into<String>, responses: Vec<String>) {
        self.scripts.push(ScriptEntry { purpose, matcher: matcher.into(), responses });
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn to_document(&self) -> String {
        canonical::to_canonical_pretty(self).expect("fixture serializes")
    }
}

#[derive(Debug)]
struct Cursor {
    entry: ScriptEntry,
    next: usize,
}

#[derive(Debug, Default)]
pub struct ScriptedBackend {
    scripts: Mutex<Vec<Cursor>>,
    log: Mutex<Vec<PromptRequest>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_fixture(fixture: &ScriptFixture) -> Result<Self, GatewayError> {
        let backend = ScriptedBackend::new();
        for e in &fixture.scripts {
            backend.register_script(e.purpose, &e.matcher, e.responses.clone())?;
        }
        Ok(backend)
    }

    pub fn register_script(
        &self,
        purpose: Purpose,
        matcher: impl Into<String>,
        responses: Vec<String>,
    ) -> Result<(), GatewayError> {
        let matcher = matcher.into();
        let mut scripts = self.scripts.lock();
        if scripts.iter().any(|c| c.entry.purpose == purpose && c.entry.matcher == matcher) {
            return Err(GatewayError::InvalidRequest(format!(
                "duplicate fingerprint ({purpose}, {matcher:?})"
            )));
        }
        scripts.push(Cursor { entry: ScriptEntry { purpose, matcher, responses }, next: 0 });
        Ok(())
    }

    /// Every request seen so far, in arrival order.
    pub fn requests(&self) -> Vec<PromptRequest> {
        self.log.lock().clone()
    }

    /// Responses not yet consumed, per fingerprint.
    pub fn remaining(&self) -> Vec<(Purpose, String, usize)> {
        self.scripts
            .lock()
            .iter()
            .map(|c| (c.entry.purpose, c.entry.matcher.clone(), c.entry.responses.len() - c.next))
            .collect()
    }
}

fn approx_tokens(chars: usize) -> u64 {
    chars.div_ceil(4) as u64
}

impl LmBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &PromptRequest) -> Result<Completion, GatewayError> {
        self.log.lock().push(request.clone());
        let final_user = request.last_user_text().unwrap_or("");
        let mut scripts = self.scripts.lock();
        let mut best: Option<usize> = None;
        for (i, c) in scripts.iter().enumerate() {
            if c.entry.purpose == request.purpose && final_user.contains(&c.entry.matcher) {
                let better = match best {
                    None => true,
                    Some(b) => c.entry.matcher.len() > scripts[b].entry.matcher.len(),
                };
                if better {
                    best = Some(i);
                }
            }
        }
        let idx = best.ok_or_else(|| {
            let preview: String = final_user.chars().take(80).collect();
            GatewayError::BackendUnavailable(format!(
                "unmatched fingerprint for purpose {} (final user message starts {preview:?})",
                request.purpose
            ))
        })?;
        let cursor = &mut scripts[idx];
        let text = cursor.entry.responses.get(cursor.next).cloned().ok_or_else(|| {
            GatewayError::BackendUnavailable(format!(
                "script ({}, {:?}) exhausted after {} response(s)",
                cursor.entry.purpose,
                cursor.entry.matcher,
                cursor.entry.responses.len()
            ))
        })?;
        cursor.next += 1;
        let prompt_chars: usize = request.messages.iter().map(|m| m.text.chars().count()).sum();
        Ok(Completion {
            usage: Usage {
                prompt_tokens: approx_tokens(prompt_chars),
                completion_tokens: approx_tokens(text.chars().count()),
            },
            text,
            structured: None,
            backend: "scripted".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ChatMessage;

    fn ask(purpose: Purpose, text: &str) -> PromptRequest {
        PromptRequest::new(purpose, vec![ChatMessage::system("sys"), ChatMessage::user(text)])
    }

    #[test]
    fn ordered_consumption_then_exhaustion() {
        let b = ScriptedBackend::new();
        b.register_script(Purpose::Response, "hello", vec!["one".into(), "two".into()]).unwrap();
        assert_eq!(b.complete(&ask(Purpose::Response, "say hello")).unwrap().text, "one");
        assert_eq!(b.complete(&ask(Purpose::Response, "hello again")).unwrap().text, "two");
        let err = b.complete(&ask(Purpose::Response, "hello")).unwrap_err();
        assert!(matches!(err, GatewayError::BackendUnavailable(ref m) if m.contains("exhausted")));
    }

    #[test]
    fn unmatched_fingerprint() {
        let b = ScriptedBackend::new();
        b.register_script(Purpose::Response, "hello", vec!["one".into()]).unwrap();
        let err = b.complete(&ask(Purpose::Planning, "hello")).unwrap_err();
        assert!(matches!(err, GatewayError::BackendUnavailable(ref m) if m.contains("unmatched fingerprint")));
        let err = b.complete(&ask(Purpose::Response, "goodbye")).unwrap_err();
        assert!(matches!(err, GatewayError::BackendUnavailable(ref m) if m.contains("unmatched fingerprint")));
    }

    #[test]
    fn matcher_checks_only_final_user_message() {
        let b = ScriptedBackend::new();
        b.register_script(Purpose::Response, "needle", vec!["hit".into()]).unwrap();
        let mut r = ask(Purpose::Response, "haystack");
        r.messages.insert(0, ChatMessage::user("needle in an earlier turn"));
        assert!(b.complete(&r).is_err());
    }

    #[test]
    fn duplicate_fingerprint_rejected() {
        let b = ScriptedBackend::new();
        b.register_script(Purpose::Response, "x", vec![]).unwrap();
        assert!(b.register_script(Purpose::Response, "x", vec![]).is_err());
        b.register_script(Purpose::Planning, "x", vec![]).unwrap();
    }

    #[test]
    fn longest_matcher_wins() {
        let b = ScriptedBackend::new();
        b.register_script(Purpose::Classification, "capability `decoy_1`", vec!["short".into()]).unwrap();
        b.register_script(Purpose::Classification, "capability `decoy_17`", vec!["long".into()]).unwrap();
        let c = b.complete(&ask(Purpose::Classification, "capability `decoy_17`")).unwrap();
        assert_eq!(c.text, "long");
    }

    #[test]
    fn identical_sequences_replay_identically() {
        let fixture = ScriptFixture {
            scripts: vec![ScriptEntry {
                purpose: Purpose::Codegen,
                matcher: "code".into(),
                responses: vec!["a".into(), "b".into()],
            }],
        };
        let run = || {
            let b = ScriptedBackend::from_fixture(&fixture).unwrap();
            (0..3)
                .map(|_| format!("{:?}", b.complete(&ask(Purpose::Codegen, "write code"))))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
        let doc = fixture.to_document();
        assert_eq!(serde_json::from_str::<ScriptFixture>(&doc).unwrap(), fixture);
    }
}
