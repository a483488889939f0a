mod common;

use common::{fixture_path, planfirst, stderr, stdout};
use planfirst_core::artifacts::read_bundle;
use tempfile::TempDir;

#[test]
fn demo_writes_a_bundle() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out/demo.tar");
    let fixture = fixture_path();
    let o = planfirst(
        dir.path(),
        &["demo", "windfarm", "--lm-script", fixture.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("session windfarm-demo completed"));
    assert!(text.contains("Maintenance report with turbine rankings"));
    let names: Vec<String> = read_bundle(&std::fs::read(&out).unwrap()).unwrap().into_iter().map(|(n, _)| n).collect();
    for want in ["manifest.json", "plan.json", "events.jsonl", "context.json", "report.md"] {
        assert!(names.iter().any(|n| n == want), "{want} missing from {names:?}");
    }

    // A second invocation finds the finished session and rewrites the same bundle.
    let first = std::fs::read(&out).unwrap();
    let o = planfirst(dir.path(), &["demo", "windfarm", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(&out).unwrap(), first);
}

#[test]
fn user_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let fixture = fixture_path();
    let lm = fixture.to_str().unwrap();
    let o = planfirst(dir.path(), &["--lm-script", lm, "plan", "approve", "ghost"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown session"));
    let o = planfirst(dir.path(), &["--lm-script", lm, "export", "ghost"], &[]);
    assert_eq!(o.status.code(), Some(1));
    let o = planfirst(dir.path(), &["--lm-script", "/no/such/fixture.json", "resume", "x"], &[]);
    assert_eq!(o.status.code(), Some(1));
    let o = planfirst(dir.path(), &["frobnicate"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(planfirst(dir.path(), &["--help"], &[]).status.code(), Some(0));
}

#[test]
fn non_interactive_run_stops_at_approval() {
    let dir = TempDir::new().unwrap();
    let fixture = fixture_path();
    let args = ["--lm-script", fixture.to_str().unwrap(), "--clock", "2025-08-09"];
    let run = [&args[..], &["run", "--task", planfirst_windfarm::fixture::GOLDEN_REQUEST, "--session", "gate"]].concat();
    let o = planfirst(dir.path(), &run, &[("AB_PLANNING_MODE", "on")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("approval required"), "{}", stderr(&o));
    assert!(stdout(&o).contains("gate-int-1"));

    let o = planfirst(dir.path(), &[&args[..], &["plan", "show", "gate"]].concat(), &[]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("turbine_data_archiver"));

    // Unfinished sessions cannot be exported.
    let o = planfirst(dir.path(), &[&args[..], &["export", "gate"]].concat(), &[]);
    assert_eq!(o.status.code(), Some(1));

    let o = planfirst(dir.path(), &[&args[..], &["plan", "reject", "gate"]].concat(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("aborted"));
    let o = planfirst(dir.path(), &[&args[..], &["plan", "approve", "gate"]].concat(), &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn auto_approved_run_completes() {
    let dir = TempDir::new().unwrap();
    let fixture = fixture_path();
    let o = planfirst(
        dir.path(),
        &[
            "--lm-script",
            fixture.to_str().unwrap(),
            "--clock",
            "2025-08-09",
            "run",
            "--task",
            planfirst_windfarm::fixture::GOLDEN_REQUEST,
            "--auto-approve",
        ],
        &[("AB_PLANNING_MODE", "on")],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("session_completed"));
}

#[test]
fn plan_edit_from_a_file() {
    let dir = TempDir::new().unwrap();
    let fixture = fixture_path();
    let args = ["--lm-script", fixture.to_str().unwrap(), "--clock", "2025-08-09"];
    let run = [&args[..], &["run", "--task", planfirst_windfarm::fixture::GOLDEN_REQUEST, "--session", "ed", "--planning", "true"]].concat();
    assert_eq!(planfirst(dir.path(), &run, &[]).status.code(), Some(1));
    let shown = stdout(&planfirst(dir.path(), &[&args[..], &["plan", "show", "ed"]].concat(), &[]));
    let mut doc: serde_json::Value = serde_json::from_str(&shown).unwrap();
    doc["steps"][4]["objective"] = "Rank turbines by efficiency".into();
    let file = dir.path().join("edited.json");
    std::fs::write(&file, doc.to_string()).unwrap();
    let o = planfirst(dir.path(), &[&args[..], &["plan", "edit", "ed", "--file", file.to_str().unwrap()]].concat(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let shown = stdout(&planfirst(dir.path(), &[&args[..], &["plan", "show", "ed"]].concat(), &[]));
    assert!(shown.contains("Rank turbines by efficiency"));

    doc["steps"].as_array_mut().unwrap().truncate(5);
    std::fs::write(&file, doc.to_string()).unwrap();
    let o = planfirst(dir.path(), &[&args[..], &["plan", "edit", "ed", "--file", file.to_str().unwrap()]].concat(), &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn crash_hook_exits_and_resume_finishes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("b.tar");
    let o = planfirst(dir.path(), &["demo", "windfarm", "--out", out.to_str().unwrap()], &[("AB_CRASH_AFTER_CHECKPOINT", "2")]);
    assert_eq!(o.status.code(), Some(86));
    assert!(!out.exists());
    let fixture = fixture_path();
    let args = ["--lm-script", fixture.to_str().unwrap(), "--clock", "2025-08-09", "--verify", "resume", "windfarm-demo"];
    let o = planfirst(dir.path(), &args, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("approval required"));
    let o = planfirst(dir.path(), &[&args[..], &["--auto-approve"]].concat(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("completed"));
}
