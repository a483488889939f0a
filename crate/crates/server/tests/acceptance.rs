//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! cargo test -p planfirst-server --test acceptance

mod common;

use planfirst_core::approval::{ApprovalDecision, InterruptKind, Verdict};
use planfirst_core::artifacts::ArtifactKind;
use planfirst_core::context::{ContextKey, ExtractedTask};
use planfirst_core::corpus;
use planfirst_core::engine::{Engine, EngineConfig};
use planfirst_core::executor::recovery::decide;
use planfirst_core::executor::{Backoff, Budgets, Checkpoint, CheckpointStore, Counters, ErrorClass, EventKind, Phase, RecoveryKind, SessionStatus};
use planfirst_core::gateway::{Gateway, Purpose, ScriptedBackend};
use planfirst_core::planner::{deserialize_plan, serialize_plan, validate_plan, DefectKind, REPLAN_MARKER};
use planfirst_core::provider::{FaultInjection, ProviderError};
use planfirst_core::registry::{assemble_planner_material, classify_all};
use planfirst_core::script::ScriptService;
use planfirst_windfarm::data::{turbine_readings, weather_readings};
use planfirst_windfarm::fixture::{self, approve_through, GOLDEN_ORDER, GOLDEN_REQUEST};
use planfirst_windfarm::oracle::{self, Band, Thresholds};
use planfirst_windfarm::providers::TurbineAnalysis;
use planfirst_windfarm::timerange::parse;
use planfirst_windfarm::{reference_clock, Pack};
use serde_json::Value;
use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};
use tempfile::TempDir;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn check<T: PartialEq + std::fmt::Debug>(what: &str, got: T, want: T) -> Result<(), String> {
    if got == want {
        Ok(())
    } else {
        Err(format!("{what}: got {got:?}, want {want:?}"))
    }
}

fn e2s(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn golden_engine(dir: &Path, planning: bool) -> Engine {
    common::settings(dir, planning).engine().unwrap()
}

fn object(engine: &Engine, session: &str, t: &str, k: &str) -> Result<Value, String> {
    Ok(engine.contexts().get_context(session, &ContextKey::new(t, k).map_err(e2s)?).map_err(e2s)?.payload)
}

fn golden_run() -> Outcome {
    let dir = TempDir::new().map_err(e2s)?;
    let started = Instant::now();
    let engine = golden_engine(dir.path(), true);
    engine.create_session("operator", Some("golden")).map_err(e2s)?;
    let out = engine.post_message("golden", GOLDEN_REQUEST).map_err(e2s)?;
    check("(a) active set", out.active_summary.as_deref(), Some("6 capabilities identified"))?;
    let plan = out.plan.ok_or("no plan")?;
    check("(b) plan order", plan.capability_order(), GOLDEN_ORDER.to_vec())?;
    check("status", approve_through(&engine, "golden", "operator").map_err(e2s)?, SessionStatus::Completed)?;

    let range = object(&engine, "golden", "TIME_RANGE", "ANALYSIS_WINDOW")?;
    check("(c) step 1 range", (range["start_date"].as_str(), range["end_date"].as_str()), (Some("2025-07-26"), Some("2025-08-09")))?;
    let turbines = object(&engine, "golden", "TURBINE_DATA", "RAW")?;
    let weather = object(&engine, "golden", "WEATHER_DATA", "RAW")?;
    let counts = (turbines["turbine_id"].as_array().map(Vec::len), weather["wind_speed"].as_array().map(Vec::len));
    check("(d) readings", counts, (Some(1680), Some(336)))?;
    let thresholds = Thresholds::from_payload(&object(&engine, "golden", "THRESHOLDS", "PERFORMANCE_STANDARDS")?).ok_or("thresholds payload")?;
    check("(e) thresholds", (thresholds.excellent_min, thresholds.good_min), (0.85, 0.75))?;
    let ranking = oracle::ranking_from_payload(&object(&engine, "golden", "ANALYSIS_RESULTS", "TURBINE_RANKING")?).map_err(e2s)?;
    let t04 = ranking.iter().find(|e| e.turbine_id == "T-04").ok_or("T-04 not ranked")?;
    check("(f) T-04 band", t04.band, Band::Maintenance)?;
    let reports = engine.artifacts("golden").map_err(e2s)?.into_iter().filter(|a| a.kind == ArtifactKind::Report).count();
    check("(g) report artifacts", reports, 1)?;
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "runtime {elapsed:?} >= 10s");
    Ok(format!("all equalities exact, {:.2}s", elapsed.as_secs_f64()))
}

fn decoupling() -> Outcome {
    let pack = Pack::load_default().map_err(e2s)?;
    let task = ExtractedTask::new(fixture::GOLDEN_STATEMENT);
    let material = |decoys: usize| -> Result<(usize, Vec<String>, String), String> {
        let mut registry = pack.registry.clone();
        let mut f = fixture::golden_fixture();
        let d = fixture::decoys(decoys);
        fixture::add_decoy_verdicts(&mut f, &d);
        for c in d {
            registry.register(c).map_err(e2s)?;
        }
        let gateway = Gateway::new(Arc::new(ScriptedBackend::from_fixture(&f).map_err(e2s)?));
        let active = classify_all(&gateway, &task, &registry, 2).map_err(e2s)?;
        let members = active.members.iter().map(|m| m.to_string()).collect();
        Ok((registry.len(), members, assemble_planner_material(&active, &registry)))
    };
    let (n6, m6, text6) = material(0)?;
    let (n100, m100, text100) = material(94)?;
    check("registry sizes", (n6, n100), (6, 100))?;
    check("relevant with decoys", m100.len(), 6)?;
    check("relevant set", &m100, &m6)?;
    ensure!(text6.as_bytes() == text100.as_bytes(), "planner material differs ({} vs {} bytes)", text6.len(), text100.len());
    Ok(format!("{} material bytes identical, 6 of 100 relevant", text6.len()))
}

fn snapshot_and_bundle(dir: &Path) -> Result<(String, Vec<u8>), String> {
    let cp = CheckpointStore::new(dir).read(planfirst_server::cli::DEMO_SESSION).map_err(e2s)?;
    let bundle = std::fs::read(dir.join("bundle.tar")).map_err(e2s)?;
    Ok((cp.context.to_canonical(), bundle))
}

fn crash_resume() -> Outcome {
    let demo = |dir: &Path, crash: Option<u32>| {
        let out = dir.join("bundle.tar");
        let k = crash.map(|k| k.to_string());
        let envs: Vec<(&str, &str)> = k.iter().map(|k| ("AB_CRASH_AFTER_CHECKPOINT", k.as_str())).collect();
        common::planfirst(dir, &["demo", "windfarm", "--out", out.to_str().unwrap()], &envs).status.code()
    };
    let reference = TempDir::new().map_err(e2s)?;
    check("reference exit", demo(reference.path(), None), Some(0))?;
    let (ref_ctx, ref_bundle) = snapshot_and_bundle(reference.path())?;
    let mut passed = 0;
    for k in 1..=6 {
        let dir = TempDir::new().map_err(e2s)?;
        check(&format!("k={k} crash exit"), demo(dir.path(), Some(k)), Some(86))?;
        ensure!(!dir.path().join("bundle.tar").exists(), "k={k}: bundle written before the crash");
        check(&format!("k={k} resume exit"), demo(dir.path(), None), Some(0))?;
        let (ctx, bundle) = snapshot_and_bundle(dir.path())?;
        ensure!(ctx == ref_ctx, "k={k}: context snapshot differs");
        ensure!(bundle == ref_bundle, "k={k}: bundle differs");
        passed += 1;
    }
    Ok(format!("{passed}/6 cut points byte-identical"))
}

/// The recovery table as specified, independent of the engine's code.
fn specified(class: ErrorClass, phase: Phase, c: Counters, b: Budgets) -> RecoveryKind {
    use ErrorClass::*;
    use RecoveryKind::*;
    let replan = |alt| if c.replans < b.max_replans { Replan } else { alt };
    let reclassify = || if c.reclassifies < b.max_reclassifies { Reclassify } else { Abort };
    match (phase, class) {
        (_, BackendRejected) | (_, Permanent) => Abort,
        (Phase::Execution, Transient | BackendUnavailable | StructuredOutput) => {
            if c.attempts < b.max_retries_per_step {
                Retry
            } else {
                replan(Abort)
            }
        }
        (Phase::Execution | Phase::Planning, Contract | InvalidPlan) => replan(Abort),
        (Phase::Planning, Transient | BackendUnavailable | StructuredOutput) => replan(Abort),
        (Phase::Execution | Phase::Planning, MissingCapability) => reclassify(),
        (Phase::Classification, _) => reclassify(),
    }
}

fn recovery() -> Outcome {
    let mut cases = 0;
    for class in ErrorClass::ALL {
        for phase in [Phase::Classification, Phase::Planning, Phase::Execution] {
            for (r, p, q) in triples(0..=3) {
                for (br, bp, bq) in triples(0..=2) {
                    let c = Counters { attempts: r, replans: p, reclassifies: q };
                    let b = Budgets { max_retries_per_step: br, max_replans: bp, max_reclassifies: bq };
                    check(&format!("{class:?}/{phase:?}/{c:?}/{b:?}"), decide(class, phase, c, b), specified(class, phase, c, b))?;
                    cases += 1;
                }
            }
        }
    }

    let dir = TempDir::new().map_err(e2s)?;
    let pack = Pack::load_default().map_err(e2s)?;
    let backend = Arc::new(ScriptedBackend::from_fixture(&fixture::golden_fixture()).map_err(e2s)?);
    let mut replan = fixture::golden_plan_document();
    replan["steps"].as_array_mut().ok_or("plan steps")?.remove(0);
    backend.register_script(Purpose::Planning, REPLAN_MARKER, vec![replan.to_string()]).map_err(e2s)?;
    let mut providers = pack.providers();
    let archiver = providers.get("turbine_data_archiver").cloned().ok_or("no archiver")?;
    let flaky = FaultInjection::new(archiver, 3, ProviderError::Transient("archive timeout".into()));
    providers.register("turbine_data_archiver", Arc::new(flaky));
    let mut config = EngineConfig::new(dir.path());
    config.budgets = Budgets { max_retries_per_step: 2, max_replans: 2, max_reclassifies: 1 };
    config.backoff = Backoff::None;
    config.auto_approve = true;
    config.verify = true;
    let scripts = ScriptService::from_env(dir.path());
    let engine = Engine::new(config, Arc::new(pack.registry.clone()), Arc::new(providers), Gateway::new(backend), Arc::new(reference_clock()), scripts)
        .map_err(e2s)?;
    engine.create_session("operator", Some("flaky")).map_err(e2s)?;
    engine.post_message("flaky", GOLDEN_REQUEST).map_err(e2s)?;
    check("status", engine.drive("flaky").map_err(e2s)?, SessionStatus::Completed)?;
    let events = engine.events("flaky", 0).map_err(e2s)?;
    let before: Vec<_> = events.iter().take_while(|e| e.kind != EventKind::PlanRevised).collect();
    let attempts = before.iter().filter(|e| e.kind == EventKind::StepStarted && e.step_index == Some(2)).count();
    check("step 2 attempts before replan", attempts, 3)?;
    let recoveries: Vec<&str> = before.iter().filter(|e| e.kind == EventKind::Recovery).filter_map(|e| e.payload["kind"].as_str()).collect();
    check("recoveries", recoveries, vec!["retry", "retry", "replan"])?;
    check("plan revisions", events.iter().filter(|e| e.kind == EventKind::PlanRevised).count(), 1)?;
    check("archiver invocations", engine.providers().invocations("turbine_data_archiver"), 4)?;
    Ok(format!("{cases} table cells match; 3 attempts, replan, completed"))
}

fn triples(r: std::ops::RangeInclusive<u32>) -> Vec<(u32, u32, u32)> {
    let mut v = Vec::new();
    for a in r.clone() {
        for b in r.clone() {
            for c in r.clone() {
                v.push((a, b, c));
            }
        }
    }
    v
}

fn defect_corpus() -> Outcome {
    let registry = corpus::corpus_registry();
    let active = corpus::corpus_active(&registry);
    let plans = corpus::defect_corpus(2025, 200);
    let kinds: BTreeSet<DefectKind> = plans.iter().flat_map(|p| p.seeded.iter().map(|d| d.kind)).collect();
    check("kinds seeded", kinds.len(), 6)?;
    let (mut seeded, mut found) = (0, 0);
    for p in &plans {
        ensure!((1..=3).contains(&p.seeded.len()), "plan with {} defects", p.seeded.len());
        let defects = validate_plan(&p.plan, corpus::scope(&registry, &active, &p.inventory));
        for s in &p.seeded {
            seeded += 1;
            if defects.iter().any(|d| d.kind == s.kind && d.step_index == Some(s.step_index)) {
                found += 1;
            }
        }
    }
    check("recall", found, seeded)?;
    let mut false_positives = 0;
    for c in corpus::clean_corpus(2026, 50) {
        false_positives += validate_plan(&c.plan, corpus::scope(&registry, &active, &c.inventory)).len();
    }
    check("false positives on clean corpus", false_positives, 0)?;
    Ok(format!("recall {found}/{seeded}, 0 false positives on 50 clean plans"))
}

fn approval_gating() -> Outcome {
    // Normal path.
    let dir = TempDir::new().map_err(e2s)?;
    let engine = golden_engine(dir.path(), true);
    engine.create_session("operator", Some("gate")).map_err(e2s)?;
    let out = engine.post_message("gate", GOLDEN_REQUEST).map_err(e2s)?;
    check("pending", out.status, SessionStatus::PendingApproval)?;
    check("drive before approval", engine.drive("gate").map_err(e2s)?, SessionStatus::PendingApproval)?;
    check("invocations before approve (normal)", engine.providers().total_invocations(), 0)?;
    let pending = out.pending_interrupt.ok_or("no interrupt")?;
    engine.resolve(ApprovalDecision::new(&pending.interrupt_id, Verdict::Approve, "op", engine.clock().now())).map_err(e2s)?;
    check("held at step approval", engine.drive("gate").map_err(e2s)?, SessionStatus::SuspendedInterrupt)?;
    check("analysis before its approval", engine.providers().invocations("turbine_analysis"), 0)?;
    check("finished", approve_through(&engine, "gate", "op").map_err(e2s)?, SessionStatus::Completed)?;

    // Crash-restart path: a fresh process over the same state directory.
    let dir = TempDir::new().map_err(e2s)?;
    {
        let engine = golden_engine(dir.path(), true);
        engine.create_session("operator", Some("gate")).map_err(e2s)?;
        engine.post_message("gate", GOLDEN_REQUEST).map_err(e2s)?;
    }
    let restarted = golden_engine(dir.path(), true);
    check("resume before approval", restarted.resume("gate").map_err(e2s)?, SessionStatus::PendingApproval)?;
    check("invocations before approve (restart)", restarted.providers().total_invocations(), 0)?;
    let pending = restarted.pending_interrupt("gate").map_err(e2s)?.ok_or("interrupt lost on restart")?;
    check("interrupt kind", pending.kind, InterruptKind::PlanApproval)?;
    restarted.resolve(ApprovalDecision::new(&pending.interrupt_id, Verdict::Approve, "op", restarted.clock().now())).map_err(e2s)?;
    check("restart finishes", approve_through(&restarted, "gate", "op").map_err(e2s)?, SessionStatus::Completed)?;

    // Reject path.
    let dir = TempDir::new().map_err(e2s)?;
    let engine = golden_engine(dir.path(), true);
    engine.create_session("operator", Some("gate")).map_err(e2s)?;
    let out = engine.post_message("gate", GOLDEN_REQUEST).map_err(e2s)?;
    let pending = out.pending_interrupt.ok_or("no interrupt")?;
    let decided = engine.resolve(ApprovalDecision::new(&pending.interrupt_id, Verdict::Reject, "op", engine.clock().now())).map_err(e2s)?;
    check("reject status", decided.status, SessionStatus::Aborted)?;
    check("drive after reject", engine.drive("gate").map_err(e2s)?, SessionStatus::Aborted)?;
    check("invocations after reject", engine.providers().total_invocations(), 0)?;
    check("context writes after reject", engine.contexts().inventory("gate").map_err(e2s)?.len(), 0)?;
    check("durable context", engine.checkpoint_of("gate").map_err(e2s)?.context.context.len(), 0)?;
    Ok("0 invocations before approval on normal, restart and reject paths".into())
}

fn oracle_equivalence() -> Outcome {
    let dir = TempDir::new().map_err(e2s)?;
    let scripts = ScriptService::from_env(dir.path());
    let provider = TurbineAnalysis { curve: Pack::load_default().map_err(e2s)?.curve };
    let range = parse("past two weeks", reference_clock().0).map_err(e2s)?;
    let mut seed = 0x5eed_u64;
    for i in 0..20 {
        seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let t = turbine_readings(seed, &range, &provider.curve);
        let w = weather_readings(seed, &range);
        let got = provider
            .script_ranking(&scripts, &format!("oracle-{i}"), fixture::ANALYSIS_SCRIPT, &t, &w, &Thresholds::STANDARD)
            .map_err(e2s)?;
        let want = oracle::rank(&t, &w, &provider.curve, &Thresholds::STANDARD);
        oracle::compare(&got, &want, 1e-9).map_err(|e| format!("seed {seed}: {e}"))?;
    }
    Ok("20/20 seeds equal within 1e-9".into())
}

fn round_trips() -> Outcome {
    for seed in 0..1000u64 {
        let plan = corpus::random_plan(&mut corpus::rng(seed));
        let doc = serialize_plan(&plan);
        let again = serialize_plan(&deserialize_plan(&doc).map_err(|e| format!("plan {seed}: {e}"))?);
        ensure!(again == doc, "plan {seed} differs after a round trip");

        let cp = corpus::random_checkpoint(&mut corpus::rng(seed));
        let doc = cp.to_document();
        let again = Checkpoint::from_document(&doc).map_err(|e| format!("checkpoint {seed}: {e}"))?.to_document();
        ensure!(again == doc, "checkpoint {seed} differs after a round trip");
    }
    Ok("1000 plans and 1000 checkpoints byte-identical".into())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("golden-run reproduction", golden_run),
        ("prompt decoupling with 94 decoys", decoupling),
        ("crash-resume equivalence", crash_resume),
        ("recovery decision table", recovery),
        ("plan-validation defect corpus", defect_corpus),
        ("approval gating", approval_gating),
        ("oracle equivalence", oracle_equivalence),
        ("serialization round-trips", round_trips),
    ];
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", n + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why}", n + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
