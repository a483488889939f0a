//! Capability registry, per-capability relevance classification, and
//! relevant-only planner material.
//!
//! Every registered capability is judged independently with one structured
//! model call whose prompt carries only that capability's summary and
//! few-shot examples. Only members of the resulting active set reach the
//! planner, so planner input size does not grow with the registry.

use crate::context::{normalize_identifier, ExtractedTask};
use crate::gateway::{ChatMessage, Gateway, GatewayError, PromptRequest, Purpose};
use crate::schema::{Field, FieldType, SchemaDescriptor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierExample {
    pub task: String,
    pub relevant: bool,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputType {
    pub context_type: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub optional: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capability {
    pub name: String,
    pub summary: String,
    pub planner_guide: String,
    pub classifier_examples: Vec<ClassifierExample>,
    #[serde(default)]
    pub input_types: Vec<InputType>,
    pub output_type: String,
    #[serde(default)]
    pub requires_approval: bool,
    pub provider: String,
    /// Produces the user-facing response; a plan must end with one of these.
    #[serde(default)]
    pub terminal: bool,
}

impl Capability {
    pub fn accepts(&self, context_type: &str) -> bool {
        self.input_types.iter().any(|t| t.context_type == context_type)
    }

    pub fn required_inputs(&self) -> impl Iterator<Item = &str> {
        self.input_types.iter().filter(|t| !t.optional).map(|t| t.context_type.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistryError {
    #[error("capability {0} is already registered")]
    DuplicateName(String),
    #[error("capability {name} is invalid: {reason}")]
    InvalidCapability { name: String, reason: String },
    #[error("registry is empty")]
    EmptyRegistry,
    #[error("classification failed for {}", .0.iter().map(|(n, e)| format!("{n} ({e})")).collect::<Vec<_>>().join(", "))]
    ClassificationFailed(Vec<(String, GatewayError)>),
    #[error("registry manifest: {0}")]
    Manifest(String),
}

pub const MIN_EXAMPLES_PER_CLASS: usize = 2;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    capabilities: BTreeMap<String, Capability>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManifestDoc {
    Wrapped { capabilities: Vec<Capability> },
    List(Vec<Capability>),
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, capability: Capability) -> Result<(), RegistryError> {
        let invalid = |reason: &str| RegistryError::InvalidCapability {
            name: capability.name.clone(),
            reason: reason.to_string(),
        };
        let name_ok = !capability.name.is_empty()
            && capability.name.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
        if !name_ok {
            return Err(invalid("name must be a lowercase identifier"));
        }
        if self.capabilities.contains_key(&capability.name) {
            return Err(RegistryError::DuplicateName(capability.name));
        }
        if capability.output_type.trim().is_empty() {
            return Err(invalid("output_type is empty"));
        }
        if normalize_identifier(&capability.output_type).as_deref() != Ok(capability.output_type.as_str()) {
            return Err(invalid("output_type must be a normalized context type"));
        }
        for t in &capability.input_types {
            if normalize_identifier(&t.context_type).as_deref() != Ok(t.context_type.as_str()) {
                return Err(invalid("input types must be normalized context types"));
            }
        }
        let positives = capability.classifier_examples.iter().filter(|e| e.relevant).count();
        let negatives = capability.classifier_examples.len() - positives;
        if positives < MIN_EXAMPLES_PER_CLASS || negatives < MIN_EXAMPLES_PER_CLASS {
            return Err(invalid(&format!(
                "needs at least {MIN_EXAMPLES_PER_CLASS} positive and {MIN_EXAMPLES_PER_CLASS} negative \
                 classifier examples (has {positives} and {negatives})"
            )));
        }
        self.capabilities.insert(capability.name.clone(), capability);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Capability> {
        self.capabilities.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.capabilities.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.capabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.capabilities.is_empty()
    }

    /// Capabilities in name order.
    pub fn iter(&self) -> impl Iterator<Item = &Capability> {
        self.capabilities.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.capabilities.keys().map(String::as_str)
    }

    pub fn from_manifest_str(text: &str) -> Result<Self, RegistryError> {
        let doc: ManifestDoc = serde_json::from_str(text).map_err(|e| RegistryError::Manifest(e.to_string()))?;
        let caps = match doc {
            ManifestDoc::Wrapped { capabilities } => capabilities,
            ManifestDoc::List(list) => list,
        };
        let mut registry = Registry::new();
        for c in caps {
            registry.register(c)?;
        }
        Ok(registry)
    }

    pub fn load_manifest(path: &Path) -> Result<Self, RegistryError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RegistryError::Manifest(format!("{}: {e}", path.display())))?;
        Self::from_manifest_str(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub capability: String,
    pub relevant: bool,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveCapabilitySet {
    pub task_hash: String,
    pub members: Vec<String>,
    pub results: Vec<ClassificationResult>,
}

impl ActiveCapabilitySet {
    pub fn from_results(task_hash: String, mut results: Vec<ClassificationResult>) -> Self {
        results.sort_by(|a, b| a.capability.cmp(&b.capability));
        let members = results.iter().filter(|r| r.relevant).map(|r| r.capability.clone()).collect();
        ActiveCapabilitySet { task_hash, members, results }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.members.iter().any(|m| m == name)
    }

    /// Audit line in the form the operator console shows.
    pub fn summary(&self) -> String {
        format!("{} capabilities identified", self.members.len())
    }
}

fn verdict_schema() -> SchemaDescriptor {
    SchemaDescriptor::new(vec![
        Field::new("relevant", FieldType::Boolean),
        Field::new("rationale", FieldType::Text),
    ])
}

/// Fingerprint fragment identifying the classification prompt for `name`.
pub fn classification_marker(name: &str) -> String {
    format!("Decide relevance for capability `{name}`.")
}

pub fn classification_request(task: &ExtractedTask, capability: &Capability) -> PromptRequest {
    let mut examples = String::new();
    for ex in &capability.classifier_examples {
        examples.push_str(&format!(
            "- Task: {}\n  relevant: {}\n  rationale: {}\n",
            ex.task, ex.relevant, ex.rationale
        ));
    }
    let constraints = if task.constraints.is_empty() {
        "(none)".to_string()
    } else {
        task.constraints.join("; ")
    };
    PromptRequest::new(
        Purpose::Classification,
        vec![
            ChatMessage::system(
                "You are a binary relevance classifier. Decide whether the single capability \
                 described below is needed to accomplish the task. Judge only this capability.",
            ),
            ChatMessage::user(format!(
                "{}\n\nCapability summary: {}\n\nExamples:\n{examples}\nTask: {}\nConstraints: {constraints}",
                classification_marker(&capability.name),
                capability.summary,
                task.statement,
            )),
        ],
    )
    .with_schema(verdict_schema())
}

pub fn classify_one(
    gateway: &Gateway,
    task: &ExtractedTask,
    capability: &Capability,
    max_repair_attempts: u32,
) -> Result<ClassificationResult, GatewayError> {
    let completion = gateway.complete_structured(&classification_request(task, capability), max_repair_attempts)?;
    let value = completion.structured.unwrap_or(Value::Null);
    Ok(ClassificationResult {
        capability: capability.name.clone(),
        relevant: value["relevant"].as_bool().unwrap_or(false),
        rationale: value["rationale"].as_str().unwrap_or("").to_string(),
    })
}

/// Classifies every registered capability (concurrently) and merges the
/// verdicts by capability name.
pub fn classify_all(
    gateway: &Gateway,
    task: &ExtractedTask,
    registry: &Registry,
    max_repair_attempts: u32,
) -> Result<ActiveCapabilitySet, RegistryError> {
    if registry.is_empty() {
        return Err(RegistryError::EmptyRegistry);
    }
    let caps: Vec<&Capability> = registry.iter().collect();
    let outcomes: Vec<(String, Result<ClassificationResult, GatewayError>)> = caps
        .par_iter()
        .map(|c| (c.name.clone(), classify_one(gateway, task, c, max_repair_attempts)))
        .collect();
    let mut results = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (name, outcome) in outcomes {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => failures.push((name, e)),
        }
    }
    if !failures.is_empty() {
        failures.sort_by(|a, b| a.0.cmp(&b.0));
        return Err(RegistryError::ClassificationFailed(failures));
    }
    Ok(ActiveCapabilitySet::from_results(task.digest(), results))
}

/// Planner-facing documentation for the active members only.
pub fn assemble_planner_material(active: &ActiveCapabilitySet, registry: &Registry) -> String {
    let members: Vec<&Capability> = active.members.iter().filter_map(|m| registry.get(m)).collect();
    let mut out = format!("Available capabilities ({}):\n", members.len());
    for c in members {
        let inputs = if c.input_types.is_empty() {
            "none".to_string()
        } else {
            c.input_types
                .iter()
                .map(|t| if t.optional { format!("{} (optional)", t.context_type) } else { t.context_type.clone() })
                .collect::<Vec<_>>()
                .join(", ")
        };
        out.push_str(&format!(
            "\n### {}\nSummary: {}\nInputs: {inputs}\nOutput: {}\n",
            c.name, c.summary, c.output_type
        ));
        if c.terminal {
            out.push_str("Produces the final response; a plan must end with a response-producing step.\n");
        }
        if c.requires_approval {
            out.push_str("Requires operator approval before it runs.\n");
        }
        out.push_str(c.planner_guide.trim_end());
        out.push('\n');
    }
    out
}
