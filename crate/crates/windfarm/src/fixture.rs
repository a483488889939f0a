//! Scripted model replies for the reference wind-farm request, plus decoy
//! capabilities for registry scaling checks.

use crate::providers::{PHASES_MARKER, REPORT_MARKER, SCRIPT_MARKER, THRESHOLDS_MARKER};
use planfirst_core::approval::{ApprovalDecision, Verdict};
use planfirst_core::engine::{Engine, EngineError};
use planfirst_core::executor::checkpoint::SessionStatus;
use planfirst_core::extraction::{COMPRESS_MARKER, EXTRACT_MARKER};
use planfirst_core::gateway::{Purpose, ScriptFixture};
use planfirst_core::planner::PLAN_MARKER;
use planfirst_core::registry::{classification_marker, Capability, ClassifierExample};
use serde_json::{json, Value};

pub const GOLDEN_REQUEST: &str = "Our wind farm has been underperforming lately. Can you analyze the turbine \
performance over the past 2 weeks, identify which turbines are operating below industry standards, and rank \
them by efficiency? I need to know which ones require immediate maintenance attention.";

pub const GOLDEN_ORDER: [&str; 6] = [
    "time_range_parsing",
    "turbine_data_archiver",
    "weather_data_retrieval",
    "knowledge_retrieval",
    "turbine_analysis",
    "respond",
];

/// The analysis script the scripted codegen call returns.
pub const ANALYSIS_SCRIPT: &str = include_str!("../../../packs/windfarm/fixtures/turbine_analysis.py");

pub const GOLDEN_STATEMENT: &str = "Analyze turbine performance over the past 2 weeks, identify turbines \
operating below industry standards, rank them by efficiency, and report which require immediate maintenance.";

fn key(t: &str, k: &str) -> Value {
    json!({"type": t, "key": k})
}

fn step(capability: &str, objective: &str, inputs: &[(&str, &str)], output: (&str, &str), criteria: &str) -> Value {
    json!({
        "capability": capability,
        "objective": objective,
        "inputs": inputs.iter().map(|(t, k)| key(t, k)).collect::<Vec<_>>(),
        "output": key(output.0, output.1),
        "success_criteria": criteria,
    })
}

/// The planner reply: six steps in reference order.
pub fn golden_plan_document() -> Value {
    json!({"steps": [
        step("time_range_parsing", "Resolve \"past 2 weeks\" to a date range",
            &[], ("TIME_RANGE", "ANALYSIS_WINDOW"), "Start and end dates resolved"),
        step("turbine_data_archiver", "Retrieve hourly turbine readings for the analysis window",
            &[("TIME_RANGE", "ANALYSIS_WINDOW")], ("TURBINE_DATA", "RAW"), "One reading per turbine and hour"),
        step("weather_data_retrieval", "Retrieve hourly wind speed for the analysis window",
            &[("TIME_RANGE", "ANALYSIS_WINDOW")], ("WEATHER_DATA", "RAW"), "One measurement per hour"),
        step("knowledge_retrieval", "Extract turbine performance standards from the operations manual",
            &[], ("THRESHOLDS", "PERFORMANCE_STANDARDS"), "Excellent and good thresholds extracted"),
        step("turbine_analysis", "Compute efficiency per turbine against the power curve and rank by efficiency",
            &[("TURBINE_DATA", "RAW"), ("WEATHER_DATA", "RAW"), ("THRESHOLDS", "PERFORMANCE_STANDARDS")],
            ("ANALYSIS_RESULTS", "TURBINE_RANKING"), "Every turbine ranked with a band"),
        step("respond", "Report turbine rankings and maintenance needs",
            &[("ANALYSIS_RESULTS", "TURBINE_RANKING"), ("THRESHOLDS", "PERFORMANCE_STANDARDS"), ("TIME_RANGE", "ANALYSIS_WINDOW")],
            ("FINAL_RESPONSE", "MAINTENANCE_REPORT"), "Maintenance report with turbine rankings delivered"),
    ]})
}

pub fn golden_task_reply() -> Value {
    json!({
        "actionable": true,
        "statement": GOLDEN_STATEMENT,
        "constraints": ["period: past 2 weeks", "compare against industry standards"],
        "dependencies": [{"task": "rank them by efficiency", "prerequisite": "Analyze turbine performance"}],
        "source_refs": [],
    })
}

pub fn golden_phases() -> Value {
    json!({"phases": [
        {"name": "data preparation", "detail": "Load turbine and wind readings, align them by hour, evaluate the reference power curve at each wind speed."},
        {"name": "performance metrics", "detail": "Per turbine, divide mean delivered power by mean expected power."},
        {"name": "benchmark comparison", "detail": "Assign bands from the thresholds and rank turbines by efficiency, highest first."},
    ]})
}

pub fn golden_summary() -> Value {
    json!({
        "summary": "Four of the five turbines meet the performance standards over the analysis window. \
T-04 delivers well under three quarters of its expected output and is the only turbine in the maintenance band. \
T-03 is in the good band and should be reviewed at the next planned service visit.",
        "recommendations": [
            {"turbine_id": "T-04", "action": "Schedule an inspection within 72 hours covering blade condition, yaw alignment, pitch system and gearbox."}
        ],
    })
}

/// Replies for one uninterrupted reference run.
pub fn golden_fixture() -> ScriptFixture {
    let mut f = ScriptFixture::default();
    let points = json!({"points": [
        "The wind farm has been underperforming lately.",
        "Analyze turbine performance over the past 2 weeks.",
        "Identify turbines below industry standards and rank them by efficiency.",
        "Flag turbines that need immediate maintenance.",
    ]});
    f.push(Purpose::Extraction, COMPRESS_MARKER, vec![points.to_string()]);
    f.push(Purpose::Extraction, EXTRACT_MARKER, vec![golden_task_reply().to_string()]);
    for name in GOLDEN_ORDER {
        let verdict = json!({"relevant": true, "rationale": format!("{name} is needed for the turbine performance analysis.")});
        f.push(Purpose::Classification, classification_marker(name), vec![verdict.to_string()]);
    }
    f.push(Purpose::Planning, PLAN_MARKER, vec![golden_plan_document().to_string()]);
    let thresholds = json!({"excellent_min": 0.85, "good_min": 0.75, "units": "fraction of expected output"});
    f.push(Purpose::Extraction, THRESHOLDS_MARKER, vec![thresholds.to_string()]);
    f.push(Purpose::Codegen, PHASES_MARKER, vec![golden_phases().to_string()]);
    f.push(Purpose::Codegen, SCRIPT_MARKER, vec![format!("```python\n{ANALYSIS_SCRIPT}```")]);
    f.push(Purpose::Response, REPORT_MARKER, vec![golden_summary().to_string()]);
    f
}

const DOMAINS: [(&str, &str); 19] = [
    ("invoice", "supplier invoices"),
    ("payroll", "payroll runs"),
    ("email", "mailbox messages"),
    ("calendar", "meeting calendars"),
    ("ticket", "helpdesk tickets"),
    ("inventory", "warehouse stock"),
    ("shipment", "parcel shipments"),
    ("contract", "legal contracts"),
    ("survey", "customer surveys"),
    ("expense", "expense claims"),
    ("lead", "sales leads"),
    ("recipe", "cooking recipes"),
    ("flight", "flight bookings"),
    ("hotel", "hotel reservations"),
    ("playlist", "music playlists"),
    ("photo", "photo albums"),
    ("tax", "tax filings"),
    ("newsletter", "newsletter campaigns"),
    ("recruiting", "job applications"),
];

const ACTIONS: [(&str, &str); 5] = [
    ("parser", "Parses"),
    ("search", "Searches"),
    ("export", "Exports"),
    ("summarizer", "Summarizes"),
    ("validator", "Validates"),
];

/// `n` unrelated capabilities (at most 95), deterministic.
pub fn decoys(n: usize) -> Vec<Capability> {
    let mut out = Vec::with_capacity(n);
    'outer: for (action, verb) in ACTIONS {
        for (domain, noun) in DOMAINS {
            if out.len() == n {
                break 'outer;
            }
            let name = format!("{domain}_{action}");
            let example = |task: String, relevant: bool, rationale: &str| ClassifierExample {
                task,
                relevant,
                rationale: rationale.to_string(),
            };
            out.push(Capability {
                summary: format!("{verb} {noun}."),
                planner_guide: format!("No inputs. Writes {}.", name.to_uppercase()),
                classifier_examples: vec![
                    example(format!("{verb} last month's {noun}."), true, "Works on exactly this data."),
                    example(format!("I need help with our {noun}."), true, "Mentions this domain."),
                    example("Rank wind turbines by efficiency.".into(), false, "Unrelated domain."),
                    example("What is the weather tomorrow?".into(), false, "Unrelated domain."),
                ],
                input_types: Vec::new(),
                output_type: name.to_uppercase(),
                requires_approval: false,
                provider: name.clone(),
                terminal: false,
                name,
            });
        }
    }
    out
}

/// Scripted "irrelevant" verdicts for every decoy.
pub fn add_decoy_verdicts(fixture: &mut ScriptFixture, decoys: &[Capability]) {
    for d in decoys {
        let verdict = json!({"relevant": false, "rationale": "Not needed for turbine performance analysis."});
        fixture.push(Purpose::Classification, classification_marker(&d.name), vec![verdict.to_string()]);
    }
}

/// Approves every pending interrupt as `decided_by` and drives the session
/// until it is terminal.
pub fn approve_through(engine: &Engine, session_id: &str, decided_by: &str) -> Result<SessionStatus, EngineError> {
    let mut status = engine.drive(session_id)?;
    while let Some(pending) = engine.pending_interrupt(session_id)? {
        let at = engine.clock().now();
        engine.resolve(ApprovalDecision::new(&pending.interrupt_id, Verdict::Approve, decided_by, at))?;
        status = engine.drive(session_id)?;
    }
    Ok(status)
}
