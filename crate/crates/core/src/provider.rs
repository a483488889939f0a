//! Executable side of a capability.

use crate::artifacts::ArtifactDraft;
use crate::clock::Clock;
use crate::context::{ContextObject, ExtractedTask};
use crate::executor::recovery::ErrorClass;
use crate::gateway::{Gateway, GatewayError};
use crate::planner::PlanStep;
use crate::schema::SchemaDescriptor;
use crate::script::{ScriptError, ScriptService};
use parking_lot::Mutex;
use serde_json::Value;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

/// Everything a provider may see: its declared inputs and shared services.
pub struct ProviderContext<'a> {
    pub session_id: &'a str,
    pub step: &'a PlanStep,
    pub plan_revision: u32,
    /// Retries already spent on this step.
    pub attempt: u32,
    pub task: Option<&'a ExtractedTask>,
    pub inputs: &'a [ContextObject],
    pub gateway: &'a Gateway,
    pub clock: &'a dyn Clock,
    pub scripts: &'a ScriptService,
    /// Output of [`CapabilityProvider::prepare`] once an approval consumed it.
    pub prepared: Option<&'a Value>,
    pub max_repair_attempts: u32,
    /// Cross-check results against engine-side oracles.
    pub verify: bool,
}

impl<'a> ProviderContext<'a> {
    pub fn input(&self, context_type: &str) -> Option<&'a ContextObject> {
        self.inputs.iter().find(|o| o.key.context_type() == context_type)
    }

    pub fn require(&self, context_type: &str) -> Result<&'a ContextObject, ProviderError> {
        self.input(context_type)
            .ok_or_else(|| ProviderError::Contract(format!("no {context_type} input supplied to step {}", self.step.index)))
    }

    pub fn job_id(&self) -> String {
        format!("{}-r{}-s{}-a{}", self.session_id, self.plan_revision, self.step.index, self.attempt)
    }
}

impl fmt::Debug for ProviderContext<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProviderContext")
            .field("session_id", &self.session_id)
            .field("step", &self.step.index)
            .field("attempt", &self.attempt)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderOutput {
    pub schema: SchemaDescriptor,
    pub payload: Value,
    pub artifacts: Vec<ArtifactDraft>,
    /// One line for the event log.
    pub summary: String,
}

impl ProviderOutput {
    pub fn new(schema: SchemaDescriptor, payload: Value, summary: impl Into<String>) -> Self {
        ProviderOutput { schema, payload, artifacts: Vec::new(), summary: summary.into() }
    }

    pub fn with_artifact(mut self, draft: ArtifactDraft) -> Self {
        self.artifacts.push(draft);
        self
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error("permanent: {0}")]
    Permanent(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl ProviderError {
    pub fn class(&self) -> ErrorClass {
        match self {
            ProviderError::Transient(_) => ErrorClass::Transient,
            ProviderError::Contract(_) => ErrorClass::Contract,
            ProviderError::Permanent(_) => ErrorClass::Permanent,
            ProviderError::Gateway(g) => gateway_class(g),
        }
    }
}

pub fn gateway_class(e: &GatewayError) -> ErrorClass {
    match e {
        GatewayError::BackendUnavailable(_) => ErrorClass::BackendUnavailable,
        GatewayError::BackendRejected(_) => ErrorClass::BackendRejected,
        GatewayError::StructuredOutputFailure { .. } => ErrorClass::StructuredOutput,
        GatewayError::InvalidRequest(_) => ErrorClass::Permanent,
    }
}

impl From<ScriptError> for ProviderError {
    fn from(e: ScriptError) -> Self {
        match e {
            ScriptError::Timeout(_) | ScriptError::BackendUnavailable(_) | ScriptError::Io(_) => {
                ProviderError::Transient(e.to_string())
            }
            ScriptError::Crash { .. } | ScriptError::OutputSchemaViolation { .. } => ProviderError::Contract(e.to_string()),
            ScriptError::InvalidJob(_) => ProviderError::Permanent(e.to_string()),
        }
    }
}

pub trait CapabilityProvider: Send + Sync {
    /// Side-effect-free preparation shown to an approver (for example a
    /// generated script). Not counted as an invocation.
    fn prepare(&self, _ctx: &ProviderContext<'_>) -> Result<Option<Value>, ProviderError> {
        Ok(None)
    }

    fn invoke(&self, ctx: &ProviderContext<'_>) -> Result<ProviderOutput, ProviderError>;
}

#[derive(Default)]
pub struct ProviderRegistry {
    providers: BTreeMap<String, Arc<dyn CapabilityProvider>>,
    invocations: Mutex<BTreeMap<String, u64>>,
}

impl fmt::Debug for ProviderRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProviderRegistry").field("providers", &self.providers.keys().collect::<Vec<_>>()).finish()
    }
}

impl ProviderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, provider: Arc<dyn CapabilityProvider>) {
        self.providers.insert(name.into(), provider);
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn CapabilityProvider>> {
        self.providers.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.providers.keys().map(String::as_str)
    }

    pub fn prepare(&self, name: &str, ctx: &ProviderContext<'_>) -> Result<Option<Value>, ProviderError> {
        self.lookup(name)?.prepare(ctx)
    }

    /// Counted call into the provider.
    pub fn invoke(&self, name: &str, ctx: &ProviderContext<'_>) -> Result<ProviderOutput, ProviderError> {
        let provider = self.lookup(name)?;
        *self.invocations.lock().entry(name.to_string()).or_default() += 1;
        provider.invoke(ctx)
    }

    fn lookup(&self, name: &str) -> Result<&Arc<dyn CapabilityProvider>, ProviderError> {
        self.providers.get(name).ok_or_else(|| ProviderError::Permanent(format!("no provider named {name}")))
    }

    pub fn invocations(&self, name: &str) -> u64 {
        self.invocations.lock().get(name).copied().unwrap_or(0)
    }

    pub fn total_invocations(&self) -> u64 {
        self.invocations.lock().values().sum()
    }
}

/// Wraps a provider so its first `failures` invocations fail with `error`.
pub struct FaultInjection {
    inner: Arc<dyn CapabilityProvider>,
    remaining: AtomicU32,
    error: ProviderError,
}

impl FaultInjection {
    pub fn new(inner: Arc<dyn CapabilityProvider>, failures: u32, error: ProviderError) -> Self {
        FaultInjection { inner, remaining: AtomicU32::new(failures), error }
    }
}

impl CapabilityProvider for FaultInjection {
    fn prepare(&self, ctx: &ProviderContext<'_>) -> Result<Option<Value>, ProviderError> {
        self.inner.prepare(ctx)
    }

    fn invoke(&self, ctx: &ProviderContext<'_>) -> Result<ProviderOutput, ProviderError> {
        let left = self.remaining.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1));
        if left.is_ok() {
            return Err(self.error.clone());
        }
        self.inner.invoke(ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_errors_map_to_classes() {
        use std::time::Duration;
        assert_eq!(ProviderError::from(ScriptError::Timeout(Duration::from_secs(1))).class(), ErrorClass::Transient);
        let crash = ScriptError::Crash { status: "1".into(), detail: "x".into() };
        assert_eq!(ProviderError::from(crash).class(), ErrorClass::Contract);
        assert_eq!(
            ProviderError::Gateway(GatewayError::BackendRejected("401".into())).class(),
            ErrorClass::BackendRejected
        );
    }
}
