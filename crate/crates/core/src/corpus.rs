//! Seeded generators for plans, checkpoints and defective plans.
//!
//! Used by property tests here and by the acceptance suite, so both draw
//! from the same distributions.

use crate::approval::{InterruptKind, InterruptRequest};
use crate::context::{ContextKey, ContextObject, ContextSnapshot, ExtractedTask, Provenance, TaskDependency};
use crate::executor::{Checkpoint, SessionStatus};
use crate::planner::{DefectKind, ExecutionPlan, PlanScope, PlanStep};
use crate::registry::{ActiveCapabilitySet, Capability, ClassificationResult, ClassifierExample, InputType, Registry};
use crate::schema::{Field, FieldType, SchemaDescriptor};
use chrono::{DateTime, TimeZone, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::collections::{BTreeMap, BTreeSet};

pub type CorpusRng = ChaCha8Rng;

pub fn rng(seed: u64) -> CorpusRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cap(name: &str, inputs: &[(&str, bool)], output: &str, terminal: bool) -> Capability {
    let ex = |task: &str, relevant: bool| ClassifierExample {
        task: task.into(),
        relevant,
        rationale: if relevant { "needed".into() } else { "unrelated".into() },
    };
    Capability {
        name: name.into(),
        summary: format!("{name} produces {output}"),
        planner_guide: format!("{name}: reads {inputs:?}, writes {output}."),
        classifier_examples: vec![
            ex(&format!("needs {output}"), true),
            ex(&format!("report on {output}"), true),
            ex("book a flight", false),
            ex("tell a joke", false),
        ],
        input_types: inputs
            .iter()
            .map(|(t, optional)| InputType { context_type: (*t).into(), optional: *optional })
            .collect(),
        output_type: output.into(),
        requires_approval: false,
        provider: name.into(),
        terminal,
    }
}

/// Fixed registry the corpus plans are drawn against. `dormant` is
/// registered but never active.
pub fn corpus_registry() -> Registry {
    let mut r = Registry::new();
    for c in [
        cap("source_a", &[], "ALPHA", false),
        cap("source_b", &[], "BETA", false),
        cap("join_ab", &[("ALPHA", false), ("BETA", false)], "GAMMA", false),
        cap("refine_c", &[("GAMMA", false)], "GAMMA", false),
        cap("summarize", &[("GAMMA", false)], "DELTA", false),
        cap("annotate", &[("DELTA", false), ("BETA", true)], "EPSILON", false),
        cap("respond", &[("EPSILON", false)], "FINAL_RESPONSE", true),
        cap("respond_short", &[("DELTA", false)], "FINAL_RESPONSE", true),
        cap("dormant", &[("ALPHA", false)], "ZETA", false),
    ] {
        r.register(c).expect("corpus registry is well formed");
    }
    r
}

pub fn corpus_active(registry: &Registry) -> ActiveCapabilitySet {
    let results = registry
        .names()
        .map(|n| ClassificationResult { capability: n.into(), relevant: n != "dormant", rationale: "corpus".into() })
        .collect();
    ActiveCapabilitySet::from_results("corpus".into(), results)
}

const WORDS: &[&str] = &[
    "alpha", "wind", "blade", "yaw", "pitch", "grid", "tower", "rotor", "gear", "nacelle", "data", "x",
];

fn word(rng: &mut CorpusRng) -> &'static str {
    WORDS.choose(rng).expect("non-empty")
}

fn ident(rng: &mut CorpusRng, used: &mut BTreeSet<String>) -> String {
    loop {
        let candidate = format!("{}_{}", word(rng), rng.random_range(0..1000));
        if used.insert(candidate.clone()) {
            return candidate;
        }
    }
}

fn text(rng: &mut CorpusRng) -> String {
    const EXTRA: &[&str] = &["\"quoted\"", "naïve", "tab\there", "line\nbreak", "50%", "≥0.85", "back\\slash", "🙂"];
    let n = rng.random_range(1..6);
    let mut parts: Vec<String> = (0..n).map(|_| word(rng).to_string()).collect();
    if rng.random_bool(0.4) {
        parts.push(EXTRA.choose(rng).expect("non-empty").to_string());
    }
    parts.join(" ")
}

fn key(t: &str, k: &str) -> ContextKey {
    ContextKey::new(t, k).expect("corpus keys are valid")
}

fn timestamp(rng: &mut CorpusRng) -> DateTime<Utc> {
    let secs = rng.random_range(1_600_000_000i64..1_900_000_000);
    let nanos = if rng.random_bool(0.5) { 0 } else { rng.random_range(0..1_000_000u32) * 1000 };
    Utc.timestamp_opt(secs, nanos).single().expect("in range")
}

/// A plan that is valid against [`corpus_registry`], plus the inventory it
/// assumes.
#[derive(Debug, Clone)]
pub struct CorpusPlan {
    pub plan: ExecutionPlan,
    pub inventory: BTreeSet<ContextKey>,
}

pub fn clean_plan(rng: &mut CorpusRng) -> CorpusPlan {
    let mut used = BTreeSet::new();
    let mut inventory = BTreeSet::new();
    let mut steps: Vec<(String, Vec<ContextKey>, ContextKey)> = Vec::new();

    let alpha = if rng.random_bool(0.3) {
        let k = key("ALPHA", &ident(rng, &mut used));
        inventory.insert(k.clone());
        k
    } else {
        let k = key("ALPHA", &ident(rng, &mut used));
        steps.push(("source_a".into(), vec![], k.clone()));
        k
    };
    let beta = key("BETA", &ident(rng, &mut used));
    let source_b = ("source_b".to_string(), vec![], beta.clone());
    if rng.random_bool(0.5) {
        steps.push(source_b);
    } else {
        steps.insert(0, source_b);
    }
    let mut gamma = key("GAMMA", &ident(rng, &mut used));
    let mut join_inputs = vec![alpha, beta.clone()];
    join_inputs.shuffle(rng);
    steps.push(("join_ab".into(), join_inputs, gamma.clone()));
    for _ in 0..rng.random_range(0..3) {
        let next = key("GAMMA", &ident(rng, &mut used));
        steps.push(("refine_c".into(), vec![gamma.clone()], next.clone()));
        gamma = next;
    }
    let delta = key("DELTA", &ident(rng, &mut used));
    steps.push(("summarize".into(), vec![gamma], delta.clone()));
    let last = key("FINAL_RESPONSE", &ident(rng, &mut used));
    if rng.random_bool(0.5) {
        let eps = key("EPSILON", &ident(rng, &mut used));
        let mut inputs = vec![delta];
        if rng.random_bool(0.5) {
            inputs.push(beta);
        }
        steps.push(("annotate".into(), inputs, eps.clone()));
        steps.push(("respond".into(), vec![eps], last));
    } else {
        steps.push(("respond_short".into(), vec![delta], last));
    }

    let steps = steps
        .into_iter()
        .enumerate()
        .map(|(i, (capability, inputs, output))| PlanStep {
            index: i as u32 + 1,
            capability,
            objective: text(rng),
            inputs,
            output,
            success_criteria: text(rng),
        })
        .collect();
    let plan = ExecutionPlan {
        plan_id: format!("plan-{:012x}", rng.random::<u64>() & 0xffff_ffff_ffff),
        task_hash: format!("{:064x}", rng.random::<u128>()),
        revision: rng.random_range(0..5),
        approved: rng.random_bool(0.5),
        created_at: timestamp(rng),
        steps,
    };
    CorpusPlan { plan, inventory }
}

/// A defect planted in a plan together with where it must be reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SeededDefect {
    pub step_index: u32,
    pub kind: DefectKind,
}

#[derive(Debug, Clone)]
pub struct DefectivePlan {
    pub plan: ExecutionPlan,
    pub inventory: BTreeSet<ContextKey>,
    pub seeded: Vec<SeededDefect>,
}

struct Draft {
    step: PlanStep,
    tag: Option<DefectKind>,
}

/// Plants `kinds` (distinct) into a clean plan. Each defect lands on its own
/// step so one never masks another.
pub fn seed_defects(rng: &mut CorpusRng, clean: CorpusPlan, kinds: &[DefectKind]) -> DefectivePlan {
    let CorpusPlan { plan, inventory } = clean;
    let mut drafts: Vec<Draft> = plan.steps.iter().cloned().map(|step| Draft { step, tag: None }).collect();
    let mut used: BTreeSet<String> = drafts.iter().map(|d| d.step.output.instance_key().to_string()).collect();
    used.extend(inventory.iter().map(|k| k.instance_key().to_string()));
    let last = drafts.len() - 1;

    let mut kinds = kinds.to_vec();
    kinds.sort();
    kinds.dedup();
    // In-place mutations first, insertions last, so positions stay valid.
    let order = |k: &DefectKind| match k {
        DefectKind::TypeMismatch | DefectKind::MissingInput | DefectKind::UnknownCapability => 0,
        _ => 1,
    };
    kinds.sort_by_key(order);

    for kind in kinds {
        match kind {
            DefectKind::TypeMismatch => {
                // The final step gets an input type it does not accept.
                let beta = drafts
                    .iter()
                    .find(|d| d.step.output.context_type() == "BETA")
                    .map(|d| d.step.output.clone())
                    .expect("every corpus plan produces BETA");
                drafts[last].step.inputs.push(beta);
                drafts[last].tag = Some(kind);
            }
            DefectKind::MissingInput => {
                let candidates: Vec<usize> =
                    (0..last).filter(|&i| drafts[i].tag.is_none() && !drafts[i].step.inputs.is_empty()).collect();
                let &i = candidates.choose(rng).expect("join_ab always has inputs");
                let j = rng.random_range(0..drafts[i].step.inputs.len());
                let t = drafts[i].step.inputs[j].context_type().to_string();
                drafts[i].step.inputs[j] = key(&t, &format!("{}_missing", ident(rng, &mut used)));
                drafts[i].tag = Some(kind);
            }
            DefectKind::UnknownCapability => {
                let candidates: Vec<usize> = (0..last).filter(|&i| drafts[i].tag.is_none()).collect();
                let &i = candidates.choose(rng).expect("plans have at least four non-final steps");
                drafts[i].step.capability = format!("ghost_{}", ident(rng, &mut used));
                drafts[i].tag = Some(kind);
            }
            DefectKind::InactiveCapability => {
                let alpha = drafts
                    .iter()
                    .map(|d| &d.step.output)
                    .chain(inventory.iter())
                    .find(|k| k.context_type() == "ALPHA")
                    .cloned()
                    .expect("ALPHA is produced or in inventory");
                let producer = drafts.iter().position(|d| d.step.output == alpha).map_or(0, |p| p + 1);
                let at = rng.random_range(producer..drafts.len() - 1);
                let step = PlanStep {
                    index: 0,
                    capability: "dormant".into(),
                    objective: text(rng),
                    inputs: vec![alpha],
                    output: key("ZETA", &ident(rng, &mut used)),
                    success_criteria: text(rng),
                };
                drafts.insert(at, Draft { step, tag: Some(kind) });
            }
            DefectKind::Cycle => {
                let a = key("GAMMA", &ident(rng, &mut used));
                let b = key("GAMMA", &ident(rng, &mut used));
                let mk = |rng: &mut CorpusRng, input: &ContextKey, output: &ContextKey| PlanStep {
                    index: 0,
                    capability: "refine_c".into(),
                    objective: text(rng),
                    inputs: vec![input.clone()],
                    output: output.clone(),
                    success_criteria: text(rng),
                };
                let first = mk(rng, &b, &a);
                let second = mk(rng, &a, &b);
                let at = rng.random_range(0..drafts.len());
                drafts.insert(at, Draft { step: second, tag: None });
                drafts.insert(at, Draft { step: first, tag: Some(kind) });
            }
            DefectKind::OutputCollision => {
                let src = drafts
                    .iter()
                    .position(|d| d.step.output.context_type() == "BETA")
                    .expect("BETA producer present");
                let mut dup = drafts[src].step.clone();
                dup.capability = "source_b".into();
                dup.objective = text(rng);
                let at = rng.random_range(src + 1..drafts.len());
                drafts.insert(at, Draft { step: dup, tag: Some(kind) });
            }
        }
    }

    let mut seeded = Vec::new();
    let steps = drafts
        .into_iter()
        .enumerate()
        .map(|(i, mut d)| {
            d.step.index = i as u32 + 1;
            if let Some(kind) = d.tag {
                seeded.push(SeededDefect { step_index: d.step.index, kind });
            }
            d.step
        })
        .collect();
    seeded.sort();
    DefectivePlan { plan: ExecutionPlan { steps, ..plan }, inventory, seeded }
}

/// `n` defective plans with one to three kinds each; every kind appears.
pub fn defect_corpus(seed: u64, n: usize) -> Vec<DefectivePlan> {
    let mut rng = rng(seed);
    (0..n)
        .map(|i| {
            let count = rng.random_range(1..=3);
            let mut kinds = vec![DefectKind::ALL[i % DefectKind::ALL.len()]];
            while kinds.len() < count {
                let k = *DefectKind::ALL.choose(&mut rng).expect("non-empty");
                if !kinds.contains(&k) {
                    kinds.push(k);
                }
            }
            let clean = clean_plan(&mut rng);
            seed_defects(&mut rng, clean, &kinds)
        })
        .collect()
}

pub fn clean_corpus(seed: u64, n: usize) -> Vec<CorpusPlan> {
    let mut rng = rng(seed);
    (0..n).map(|_| clean_plan(&mut rng)).collect()
}

/// Scope for validating corpus plans.
pub fn scope<'a>(
    registry: &'a Registry,
    active: &'a ActiveCapabilitySet,
    inventory: &'a BTreeSet<ContextKey>,
) -> PlanScope<'a> {
    PlanScope { registry, active, inventory }
}

fn random_value(rng: &mut CorpusRng, ty: &FieldType, depth: u32) -> Value {
    match ty {
        FieldType::Text => Value::String(text(rng)),
        FieldType::Integer => json!(rng.random_range(-1_000_000i64..1_000_000)),
        FieldType::Real => {
            let v: f64 = rng.random_range(-1e6..1e6) * if rng.random_bool(0.2) { 1e-9 } else { 1.0 };
            json!(v)
        }
        FieldType::Boolean => json!(rng.random_bool(0.5)),
        FieldType::Timestamp => json!(timestamp(rng).to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true)),
        FieldType::Series(inner) => {
            let n = rng.random_range(0..if depth > 1 { 2 } else { 5 });
            Value::Array((0..n).map(|_| random_value(rng, inner, depth + 1)).collect())
        }
        FieldType::Record(fields) => {
            let mut m = serde_json::Map::new();
            for f in fields {
                m.insert(f.name.clone(), random_value(rng, &f.ty, depth + 1));
            }
            Value::Object(m)
        }
    }
}

fn random_scalar(rng: &mut CorpusRng) -> FieldType {
    [FieldType::Text, FieldType::Integer, FieldType::Real, FieldType::Boolean, FieldType::Timestamp]
        .choose(rng)
        .expect("non-empty")
        .clone()
}

fn random_schema(rng: &mut CorpusRng) -> SchemaDescriptor {
    let mut used = BTreeSet::new();
    let n = rng.random_range(1..4);
    let fields = (0..n)
        .map(|_| {
            let name = ident(rng, &mut used);
            let ty = match rng.random_range(0..4) {
                0 => FieldType::series(FieldType::Record(vec![
                    Field::new("id", FieldType::Text),
                    Field::new("value", random_scalar(rng)),
                ])),
                1 => FieldType::series(random_scalar(rng)),
                _ => random_scalar(rng),
            };
            Field::new(name, ty)
        })
        .collect();
    SchemaDescriptor::new(fields)
}

fn random_snapshot(rng: &mut CorpusRng, keys: &[ContextKey]) -> ContextSnapshot {
    let mut objects: BTreeMap<ContextKey, ContextObject> = BTreeMap::new();
    for k in keys {
        let schema = random_schema(rng);
        let payload = random_value(rng, &FieldType::Record(schema.fields.clone()), 0);
        let provenance = match rng.random_range(0..3) {
            0 => Provenance::User,
            1 => Provenance::ExternalSource,
            _ => Provenance::Step(rng.random_range(1..8)),
        };
        objects.insert(k.clone(), ContextObject::new(k.clone(), schema, payload, provenance, timestamp(rng)));
    }
    ContextSnapshot { context: objects.into_values().collect() }
}

fn random_task(rng: &mut CorpusRng) -> ExtractedTask {
    let mut t = ExtractedTask::new(text(rng));
    t.constraints = (0..rng.random_range(0..3)).map(|_| text(rng)).collect();
    if rng.random_bool(0.3) {
        t.dependencies.push(TaskDependency { task: text(rng), prerequisite: text(rng) });
    }
    t.source_refs = (0..rng.random_range(0..2)).map(|i| format!("mem-{i}")).collect();
    t
}

/// A checkpoint whose fields are individually plausible; not necessarily a
/// state the engine would reach.
pub fn random_checkpoint(rng: &mut CorpusRng) -> Checkpoint {
    let session = format!("s-{:08x}", rng.random::<u32>());
    let mut cp = Checkpoint::new(&session);
    cp.status = *[
        SessionStatus::PendingApproval,
        SessionStatus::Running,
        SessionStatus::SuspendedInterrupt,
        SessionStatus::Completed,
        SessionStatus::Aborted,
    ]
    .choose(rng)
    .expect("non-empty");
    if rng.random_bool(0.85) {
        let CorpusPlan { plan, inventory } = clean_plan(rng);
        let n = plan.steps.len() as u32;
        cp.cursor = rng.random_range(1..=n + 1);
        let mut keys: Vec<ContextKey> = inventory.into_iter().collect();
        keys.extend(plan.steps.iter().take(cp.cursor as usize - 1).map(|s| s.output.clone()));
        cp.context = random_snapshot(rng, &keys);
        for i in 1..=cp.cursor.min(n) {
            if rng.random_bool(0.3) {
                cp.attempt_counters.insert(i, rng.random_range(0..3));
            }
        }
        cp.approved_step = rng.random_bool(0.3).then_some(cp.cursor);
        if rng.random_bool(0.3) {
            cp.prepared = Some(json!({"script": text(rng), "phases": [text(rng), text(rng)]}));
        }
        if rng.random_bool(0.4) {
            cp.interrupt_counter = rng.random_range(1..5);
            let kind = *[InterruptKind::PlanApproval, InterruptKind::StepApproval, InterruptKind::MemoryWrite]
                .choose(rng)
                .expect("non-empty");
            let payload = match kind {
                InterruptKind::PlanApproval => serde_json::to_value(&plan).expect("plan serializes"),
                InterruptKind::StepApproval => json!({"step": plan.steps[0], "rendering": text(rng)}),
                InterruptKind::MemoryWrite => json!({"user_id": "u", "text": text(rng), "tags": [], "created_at": timestamp(rng)}),
            };
            cp.pending_interrupt = Some(InterruptRequest {
                interrupt_id: crate::approval::interrupt_id(&session, cp.interrupt_counter),
                session_id: session.clone(),
                kind,
                payload,
                raised_at: timestamp(rng),
            });
        }
        let registry = corpus_registry();
        cp.active = Some(corpus_active(&registry));
        cp.plan = Some(plan);
    }
    cp.replan_count = rng.random_range(0..3);
    cp.reclassify_count = rng.random_range(0..2);
    cp.task = rng.random_bool(0.8).then(|| random_task(rng));
    cp.next_event_seq = rng.random_range(1..500);
    cp.pending_replan = rng.random_bool(0.2).then(|| text(rng));
    cp.abort_reason = (cp.status == SessionStatus::Aborted).then(|| text(rng));
    cp
}

pub fn random_plan(rng: &mut CorpusRng) -> ExecutionPlan {
    clean_plan(rng).plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{deserialize_plan, serialize_plan, validate_plan};
    use proptest::prelude::*;

    #[test]
    fn clean_corpus_has_no_defects() {
        let reg = corpus_registry();
        let act = corpus_active(&reg);
        for c in clean_corpus(7, 50) {
            let d = validate_plan(&c.plan, scope(&reg, &act, &c.inventory));
            assert!(d.is_empty(), "{d:?}\n{}", serialize_plan(&c.plan));
        }
    }

    #[test]
    fn seeded_defects_are_all_found() {
        let reg = corpus_registry();
        let act = corpus_active(&reg);
        let corpus = defect_corpus(11, 200);
        let kinds: BTreeSet<DefectKind> = corpus.iter().flat_map(|p| p.seeded.iter().map(|d| d.kind)).collect();
        assert_eq!(kinds.len(), 6);
        for p in &corpus {
            assert!((1..=3).contains(&p.seeded.len()));
            let found = validate_plan(&p.plan, scope(&reg, &act, &p.inventory));
            for s in &p.seeded {
                assert!(
                    found.iter().any(|d| d.kind == s.kind && d.step_index == Some(s.step_index)),
                    "missing {s:?} in {found:?}\n{}",
                    serialize_plan(&p.plan)
                );
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn plan_documents_round_trip(seed in any::<u64>()) {
            let plan = random_plan(&mut rng(seed));
            let doc = serialize_plan(&plan);
            let back = deserialize_plan(&doc).unwrap();
            prop_assert_eq!(&back, &plan);
            prop_assert_eq!(serialize_plan(&back), doc);
        }

        #[test]
        fn checkpoint_documents_round_trip(seed in any::<u64>()) {
            let cp = random_checkpoint(&mut rng(seed));
            let doc = cp.to_document();
            let back = Checkpoint::from_document(&doc).unwrap();
            prop_assert_eq!(back.to_document(), doc);
        }
    }
}
