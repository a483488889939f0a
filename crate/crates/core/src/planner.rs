//! Upfront execution plans: generation, validation, canonical documents and
//! operator revision.
//!
//! A plan is a numbered sequence of steps. Each step names one capability, the
//! context keys it reads and the single key it writes, so dependencies are
//! explicit in the document itself. Validation reports every defect it finds
//! rather than stopping at the first.

use crate::canonical;
use crate::context::{ContextKey, ExtractedTask, InventoryEntry};
use crate::gateway::{ChatMessage, Gateway, GatewayError, PromptRequest, Purpose};
use crate::registry::{ActiveCapabilitySet, Registry};
use crate::schema::{Field, FieldType, SchemaDescriptor};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub index: u32,
    pub capability: String,
    pub objective: String,
    pub inputs: Vec<ContextKey>,
    pub output: ContextKey,
    pub success_criteria: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub plan_id: String,
    pub task_hash: String,
    pub revision: u32,
    pub approved: bool,
    pub created_at: DateTime<Utc>,
    pub steps: Vec<PlanStep>,
}

impl ExecutionPlan {
    pub fn step(&self, index: u32) -> Option<&PlanStep> {
        index.checked_sub(1).and_then(|i| self.steps.get(i as usize))
    }

    pub fn capability_order(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.capability.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    UnknownCapability,
    MissingInput,
    Cycle,
    OutputCollision,
    TypeMismatch,
    InactiveCapability,
}

impl DefectKind {
    pub const ALL: [DefectKind; 6] = [
        DefectKind::UnknownCapability,
        DefectKind::MissingInput,
        DefectKind::Cycle,
        DefectKind::OutputCollision,
        DefectKind::TypeMismatch,
        DefectKind::InactiveCapability,
    ];
}

impl fmt::Display for DefectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DefectKind::UnknownCapability => "unknown_capability",
            DefectKind::MissingInput => "missing_input",
            DefectKind::Cycle => "cycle",
            DefectKind::OutputCollision => "output_collision",
            DefectKind::TypeMismatch => "type_mismatch",
            DefectKind::InactiveCapability => "inactive_capability",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlanDefect {
    pub step_index: Option<u32>,
    pub kind: DefectKind,
    pub detail: String,
}

impl fmt::Display for PlanDefect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step_index {
            Some(i) => write!(f, "step {i}: {} ({})", self.kind, self.detail),
            None => write!(f, "plan: {} ({})", self.kind, self.detail),
        }
    }
}

/// True when the defects say the active set lacks something the plan needs.
pub fn lacks_capability(defects: &[PlanDefect]) -> bool {
    defects
        .iter()
        .any(|d| matches!(d.kind, DefectKind::UnknownCapability | DefectKind::InactiveCapability))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("planner material is empty")]
    EmptyMaterial,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("invalid plan: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidPlan(Vec<PlanDefect>),
    #[error("malformed plan document at {location}: {detail}")]
    MalformedPlanDocument { location: String, detail: String },
}

/// What a plan is validated against.
#[derive(Debug, Clone, Copy)]
pub struct PlanScope<'a> {
    pub registry: &'a Registry,
    pub active: &'a ActiveCapabilitySet,
    pub inventory: &'a BTreeSet<ContextKey>,
}

pub fn validate_plan(plan: &ExecutionPlan, scope: PlanScope<'_>) -> Vec<PlanDefect> {
    let mut defects = Vec::new();
    let mut push = |step: Option<u32>, kind: DefectKind, detail: String| {
        defects.push(PlanDefect { step_index: step, kind, detail })
    };

    if plan.steps.is_empty() {
        push(None, DefectKind::TypeMismatch, "plan has no steps; it must end with a response-producing step".into());
        return defects;
    }

    let mut producers: BTreeMap<&ContextKey, Vec<usize>> = BTreeMap::new();
    for (pos, step) in plan.steps.iter().enumerate() {
        producers.entry(&step.output).or_default().push(pos);
    }

    for (pos, step) in plan.steps.iter().enumerate() {
        let at = Some(step.index);
        match scope.registry.get(&step.capability) {
            None => push(at, DefectKind::UnknownCapability, format!("capability {} is not registered", step.capability)),
            Some(cap) => {
                if !scope.active.contains(&cap.name) {
                    push(at, DefectKind::InactiveCapability, format!("capability {} was not classified relevant", cap.name));
                }
                for input in &step.inputs {
                    if !cap.accepts(input.context_type()) {
                        push(at, DefectKind::TypeMismatch, format!("{} does not accept input type {}", cap.name, input.context_type()));
                    }
                }
                if step.output.context_type() != cap.output_type {
                    push(
                        at,
                        DefectKind::TypeMismatch,
                        format!("{} produces {}, not {}", cap.name, cap.output_type, step.output.context_type()),
                    );
                }
                for required in cap.required_inputs() {
                    if !step.inputs.iter().any(|k| k.context_type() == required) {
                        push(at, DefectKind::MissingInput, format!("required input type {required} is not supplied"));
                    }
                }
            }
        }
        if scope.inventory.contains(&step.output) {
            push(at, DefectKind::OutputCollision, format!("output {} already exists in the session context", step.output));
        }
        if producers[&step.output].iter().any(|&p| p < pos) {
            push(at, DefectKind::OutputCollision, format!("output {} is also produced by an earlier step", step.output));
        }
    }

    // Producer -> consumer graph over step positions.
    let n = plan.steps.len();
    let mut edges: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (pos, step) in plan.steps.iter().enumerate() {
        for input in &step.inputs {
            if let Some(ps) = producers.get(input) {
                for &p in ps {
                    edges[p].push(pos);
                }
            }
        }
    }
    let components = strongly_connected(&edges);
    let mut component_of = vec![0usize; n];
    for (c, members) in components.iter().enumerate() {
        for &m in members {
            component_of[m] = c;
        }
    }
    for members in &components {
        let cyclic = members.len() > 1 || edges[members[0]].contains(&members[0]);
        if cyclic {
            let mut indices: Vec<u32> = members.iter().map(|&m| plan.steps[m].index).collect();
            indices.sort_unstable();
            push(
                Some(indices[0]),
                DefectKind::Cycle,
                format!("steps {indices:?} depend on each other's outputs"),
            );
        }
    }

    for (pos, step) in plan.steps.iter().enumerate() {
        for input in &step.inputs {
            if scope.inventory.contains(input) {
                continue;
            }
            let ps = producers.get(input).map(Vec::as_slice).unwrap_or(&[]);
            if ps.iter().any(|&p| p < pos) {
                continue;
            }
            if ps.iter().any(|&p| component_of[p] == component_of[pos]) {
                continue;
            }
            push(
                Some(step.index),
                DefectKind::MissingInput,
                format!("input {input} is not produced by an earlier step nor present in the session context"),
            );
        }
    }

    let last = plan.steps.last().expect("non-empty");
    if let Some(cap) = scope.registry.get(&last.capability) {
        if !cap.terminal {
            push(
                Some(last.index),
                DefectKind::TypeMismatch,
                format!("final step uses {}, which does not produce a response", cap.name),
            );
        }
    }

    defects.sort();
    defects.dedup();
    defects
}

/// Tarjan's algorithm; components are returned with members in ascending order.
fn strongly_connected(edges: &[Vec<usize>]) -> Vec<Vec<usize>> {
    struct State<'a> {
        edges: &'a [Vec<usize>],
        index: Vec<Option<usize>>,
        low: Vec<usize>,
        on_stack: Vec<bool>,
        stack: Vec<usize>,
        next: usize,
        out: Vec<Vec<usize>>,
    }
    fn visit(s: &mut State<'_>, v: usize) {
        s.index[v] = Some(s.next);
        s.low[v] = s.next;
        s.next += 1;
        s.stack.push(v);
        s.on_stack[v] = true;
        for i in 0..s.edges[v].len() {
            let w = s.edges[v][i];
            match s.index[w] {
                None => {
                    visit(s, w);
                    s.low[v] = s.low[v].min(s.low[w]);
                }
                Some(iw) if s.on_stack[w] => s.low[v] = s.low[v].min(iw),
                _ => {}
            }
        }
        if Some(s.low[v]) == s.index[v] {
            let mut comp = Vec::new();
            while let Some(w) = s.stack.pop() {
                s.on_stack[w] = false;
                comp.push(w);
                if w == v {
                    break;
                }
            }
            comp.sort_unstable();
            s.out.push(comp);
        }
    }
    let n = edges.len();
    let mut s = State {
        edges,
        index: vec![None; n],
        low: vec![0; n],
        on_stack: vec![false; n],
        stack: Vec::new(),
        next: 0,
        out: Vec::new(),
    };
    for v in 0..n {
        if s.index[v].is_none() {
            visit(&mut s, v);
        }
    }
    s.out
}

pub fn serialize_plan(plan: &ExecutionPlan) -> String {
    canonical::to_canonical_pretty(plan).expect("plan serializes")
}

pub fn deserialize_plan(document: &str) -> Result<ExecutionPlan, PlanError> {
    let plan: ExecutionPlan = serde_json::from_str(document).map_err(|e| PlanError::MalformedPlanDocument {
        location: format!("line {} column {}", e.line(), e.column()),
        detail: e.to_string(),
    })?;
    for (pos, step) in plan.steps.iter().enumerate() {
        if step.index as usize != pos + 1 {
            return Err(PlanError::MalformedPlanDocument {
                location: format!("steps[{pos}].index"),
                detail: format!("expected index {}, found {}", pos + 1, step.index),
            });
        }
    }
    Ok(plan)
}

/// Applies an operator's edited document. Identity fields (`plan_id`,
/// `task_hash`, `created_at`) are kept from the current plan; the revision is
/// bumped and approval cleared even when nothing changed.
pub fn revise_plan(plan: &ExecutionPlan, edited: &str, scope: PlanScope<'_>) -> Result<ExecutionPlan, PlanError> {
    let mut revised = deserialize_plan(edited)?;
    revised.plan_id = plan.plan_id.clone();
    revised.task_hash = plan.task_hash.clone();
    revised.created_at = plan.created_at;
    revised.revision = plan.revision + 1;
    revised.approved = false;
    let defects = validate_plan(&revised, scope);
    if defects.is_empty() {
        Ok(revised)
    } else {
        Err(PlanError::InvalidPlan(defects))
    }
}

pub const PLAN_MARKER: &str = "Compose the complete execution plan for this task.";
pub const REPLAN_MARKER: &str = "Revise the execution plan after a failure.";

fn key_schema() -> FieldType {
    FieldType::Record(vec![Field::new("type", FieldType::Text), Field::new("key", FieldType::Text)])
}

fn plan_schema() -> SchemaDescriptor {
    SchemaDescriptor::new(vec![Field::new(
        "steps",
        FieldType::series(FieldType::Record(vec![
            Field::new("capability", FieldType::Text),
            Field::new("objective", FieldType::Text),
            Field::new("inputs", FieldType::series(key_schema())),
            Field::new("output", key_schema()),
            Field::new("success_criteria", FieldType::Text),
        ])),
    )])
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub revision: u32,
    /// Failed plan and failure detail, present when replanning.
    pub failure_context: Option<String>,
    pub created_at: DateTime<Utc>,
    pub max_repair_attempts: u32,
}

fn steps_from_value(v: &Value) -> Result<Vec<PlanStep>, String> {
    let key = |k: &Value| -> Result<ContextKey, String> {
        ContextKey::new(k["type"].as_str().unwrap_or(""), k["key"].as_str().unwrap_or("")).map_err(|e| e.to_string())
    };
    v["steps"]
        .as_array()
        .ok_or("steps missing")?
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(PlanStep {
                index: i as u32 + 1,
                capability: s["capability"].as_str().unwrap_or("").to_string(),
                objective: s["objective"].as_str().unwrap_or("").to_string(),
                inputs: s["inputs"].as_array().into_iter().flatten().map(key).collect::<Result<_, _>>()?,
                output: key(&s["output"])?,
                success_criteria: s["success_criteria"].as_str().unwrap_or("").to_string(),
            })
        })
        .collect()
}

fn render_inventory(inventory: &[InventoryEntry]) -> String {
    if inventory.is_empty() {
        return "(empty)\n".into();
    }
    inventory
        .iter()
        .map(|e| {
            let fields: Vec<String> = e.schema.fields.iter().map(|f| format!("{}: {}", f.name, f.ty)).collect();
            format!("- {{type: {}, key: {}}} from {} with fields [{}]\n", e.key.context_type(), e.key.instance_key(), e.provenance, fields.join(", "))
        })
        .collect()
}

pub fn planning_request(
    task: &ExtractedTask,
    material: &str,
    inventory: &[InventoryEntry],
    failure_context: Option<&str>,
) -> PromptRequest {
    let mut user = String::new();
    user.push_str(if failure_context.is_some() { REPLAN_MARKER } else { PLAN_MARKER });
    user.push_str(&format!("\n\nTask: {}\n", task.statement));
    if !task.constraints.is_empty() {
        user.push_str(&format!("Constraints: {}\n", task.constraints.join("; ")));
    }
    for d in &task.dependencies {
        user.push_str(&format!("Ordering hint: \"{}\" needs \"{}\" first\n", d.task, d.prerequisite));
    }
    user.push_str("\nContext already available:\n");
    user.push_str(&render_inventory(inventory));
    if let Some(failure) = failure_context {
        user.push_str(&format!("\nPrevious attempt failed:\n{failure}\n"));
    }
    PromptRequest::new(
        Purpose::Planning,
        vec![
            ChatMessage::system(format!(
                "You are the planner of a plan-first orchestration engine. Produce the complete \
                 ordered list of steps before anything runs. Each step uses exactly one capability \
                 listed below, reads context keys produced by earlier steps or already available, \
                 and writes one new context key {{type, key}} whose type is the capability's output \
                 type. The last step must use a response-producing capability.\n\n{material}"
            )),
            ChatMessage::user(user),
        ],
    )
    .with_schema(plan_schema())
}

/// One structured model call; the result is validated before it is returned.
/// No capability provider is touched.
pub fn generate_plan(
    gateway: &Gateway,
    task: &ExtractedTask,
    material: &str,
    inventory: &[InventoryEntry],
    scope: PlanScope<'_>,
    options: &GenerateOptions,
) -> Result<ExecutionPlan, PlanError> {
    if material.trim().is_empty() {
        return Err(PlanError::EmptyMaterial);
    }
    let request = planning_request(task, material, inventory, options.failure_context.as_deref());
    let completion =
        gateway.complete_structured_with(&request, options.max_repair_attempts, |v| steps_from_value(v).map(|_| ()))?;
    let steps = steps_from_value(completion.structured.as_ref().expect("structured value"))
        .expect("checked inside the repair loop");
    let task_hash = task.digest();
    let id_seed = canonical::digest_of(&(&task_hash, options.revision, &steps)).expect("steps serialize");
    let plan = ExecutionPlan {
        plan_id: format!("plan-{}", &id_seed[..12]),
        task_hash,
        revision: options.revision,
        approved: false,
        created_at: options.created_at,
        steps,
    };
    let defects = validate_plan(&plan, scope);
    if defects.is_empty() {
        Ok(plan)
    } else {
        Err(PlanError::InvalidPlan(defects))
    }
}
