//! Step execution, checkpoints, the event log and the recovery table.
//!
//! The run loop itself lives in [`crate::engine`]; this module holds the
//! pieces it is built from.

pub mod checkpoint;
pub mod events;
pub mod recovery;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointStore, SessionStatus, WriteTag};
pub use events::{EventKind, EventLog, ExecutionEvent};
pub use recovery::{classify_error, Backoff, Budgets, Counters, ErrorClass, Phase, RecoveryAction, RecoveryKind};

use crate::artifacts::ArtifactDraft;
use crate::context::{ContextError, ContextObject, ContextStore, Provenance};
use crate::planner::PlanStep;
use crate::provider::{ProviderContext, ProviderError, ProviderRegistry};
use crate::registry::Capability;

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub object: ContextObject,
    pub artifacts: Vec<ArtifactDraft>,
    pub summary: String,
}

/// Looks up every declared input; an unmet one is a contract failure raised
/// before the provider runs.
pub fn resolve_inputs(store: &ContextStore, session: &str, step: &PlanStep) -> Result<Vec<ContextObject>, ProviderError> {
    step.inputs
        .iter()
        .map(|key| match store.get_context(session, key) {
            Ok(obj) => Ok(obj),
            Err(ContextError::NotFound(_)) => Err(ProviderError::Contract(format!("missing input {key}"))),
            Err(e) => Err(ProviderError::Permanent(e.to_string())),
        })
        .collect()
}

/// Invokes the capability's provider with only the declared inputs and checks
/// the output against the schema it declares.
pub fn execute_step(
    providers: &ProviderRegistry,
    capability: &Capability,
    ctx: &ProviderContext<'_>,
) -> Result<StepOutput, ProviderError> {
    let out = providers.invoke(&capability.provider, ctx)?;
    out.schema.check().map_err(|v| ProviderError::Contract(format!("output schema is invalid: {v}")))?;
    out.schema
        .validate(&out.payload)
        .map_err(|v| ProviderError::Contract(format!("output violates its schema: {v}")))?;
    let object = ContextObject::new(
        ctx.step.output.clone(),
        out.schema,
        out.payload,
        Provenance::Step(ctx.step.index),
        ctx.clock.now(),
    );
    Ok(StepOutput { object, artifacts: out.artifacts, summary: out.summary })
}
