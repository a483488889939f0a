//! `planfirst` command line.
//!
//! Exit codes: 0 on success, 1 for user errors (bad input, approval
//! required), 2 when the engine fails or a session aborts.

use crate::app::{parse_date, Settings};
use anyhow::Context;
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use planfirst_core::approval::{ApprovalDecision, InterruptRequest, Verdict};
use planfirst_core::canonical;
use planfirst_core::engine::{Engine, EngineError};
use planfirst_core::executor::{ExecutionEvent, SessionStatus};
use planfirst_windfarm::fixture::GOLDEN_REQUEST;
use serde_json::Value;
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const DEMO_SESSION: &str = "windfarm-demo";
pub const DEMO_DATE: &str = "2025-08-09";

#[derive(Debug, Parser)]
#[command(name = "planfirst", version, about = "Plan-first agent orchestration engine")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Durable state directory.
    #[arg(long, env = "AB_DATA_DIR", default_value = "data", global = true)]
    pub data_dir: PathBuf,
    /// Capability pack directory.
    #[arg(long, global = true)]
    pub pack: Option<PathBuf>,
    /// Registry manifest replacing the pack's.
    #[arg(long, global = true)]
    pub registry: Option<PathBuf>,
    /// Replay model responses from a fixture instead of calling the live endpoint.
    #[arg(long, global = true)]
    pub lm_script: Option<PathBuf>,
    /// Pin the clock to midnight UTC of a YYYY-MM-DD date.
    #[arg(long, global = true, value_parser = parse_date)]
    pub clock: Option<NaiveDate>,
    /// Check script results against the native oracle.
    #[arg(long, global = true)]
    pub verify: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = "AB_LISTEN_ADDR", default_value = "127.0.0.1:8080")]
        listen: String,
    },
    /// Interactive conversation on one session.
    Chat {
        #[arg(long)]
        session: Option<String>,
        #[arg(long, default_value = "operator")]
        user: String,
    },
    /// Run one task to completion without prompting.
    Run {
        #[arg(long)]
        task: String,
        #[arg(long)]
        session: Option<String>,
        #[arg(long, default_value = "operator")]
        user: String,
        /// Approve every interrupt as it is raised.
        #[arg(long)]
        auto_approve: bool,
        /// Turn the plan review gate on or off.
        #[arg(long)]
        planning: Option<bool>,
    },
    /// Inspect or decide on a session's plan.
    Plan {
        #[command(subcommand)]
        action: PlanAction,
    },
    /// Continue a session from its last checkpoint.
    Resume {
        session: String,
        #[arg(long)]
        auto_approve: bool,
    },
    /// Bundled demonstrations.
    Demo {
        #[command(subcommand)]
        which: Demo,
    },
    /// Write a terminal session's bundle.
    Export {
        session: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum PlanAction {
    Show { session: String },
    /// Replace the pending plan with an edited document (file or stdin).
    Edit {
        session: String,
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long, default_value = "operator")]
        by: String,
    },
    Approve {
        session: String,
        #[arg(long, default_value = "operator")]
        by: String,
    },
    Reject {
        session: String,
        #[arg(long, default_value = "operator")]
        by: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum Demo {
    /// Wind-farm maintenance analysis on the scripted backend.
    Windfarm {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum Failure {
    User(String),
    Engine(String),
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::UnknownSession(_)
            | EngineError::SessionExists(_)
            | EngineError::Conflict(_)
            | EngineError::InvalidInput(_)
            | EngineError::NotTerminal(_)
            | EngineError::Approval(_) => Failure::User(e.to_string()),
            other => Failure::Engine(other.to_string()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::User(format!("{e:#}"))
    }
}

type Outcome = Result<(), Failure>;

pub fn main() -> i32 {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(Failure::User(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Engine(m)) => {
            eprintln!("engine failure: {m}");
            2
        }
    }
}

fn settings(g: &Global) -> Settings {
    Settings {
        data_dir: g.data_dir.clone(),
        pack: g.pack.clone(),
        registry: g.registry.clone(),
        lm_script: g.lm_script.clone(),
        clock: g.clock,
        planning_mode: None,
        auto_approve: false,
        verify: g.verify,
    }
}

pub fn run(cli: Cli) -> Outcome {
    let mut s = settings(&cli.global);
    match cli.command {
        Command::Serve { listen } => serve(&s, &listen),
        Command::Chat { session, user } => chat(&s.engine()?, session, &user),
        Command::Run { task, session, user, auto_approve, planning } => {
            s.auto_approve = auto_approve;
            s.planning_mode = planning;
            run_task(&s.engine()?, &task, session, &user)
        }
        Command::Plan { action } => plan(&s.engine()?, action),
        Command::Resume { session, auto_approve } => {
            s.auto_approve = auto_approve;
            let engine = s.engine()?;
            let status = engine.resume(&session)?;
            finish(&engine, &session, status, 0)
        }
        Command::Demo { which: Demo::Windfarm { out } } => {
            s.clock = s.clock.or_else(|| parse_date(DEMO_DATE).ok());
            s.planning_mode = Some(false);
            s.auto_approve = true;
            s.verify = true;
            if s.lm_script.is_none() {
                s.lm_script = Some(s.load_pack()?.fixture_path());
            }
            demo(&s.engine()?, out.unwrap_or_else(|| s.data_dir.join(format!("{DEMO_SESSION}.tar"))))
        }
        Command::Export { session, out } => {
            let engine = s.engine()?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("{session}.tar")));
            engine.write_bundle(&session, &out)?;
            println!("bundle written to {}", out.display());
            Ok(())
        }
    }
}

fn serve(s: &Settings, listen: &str) -> Outcome {
    let engine = Arc::new(s.engine()?);
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(listen).await.with_context(|| format!("binding {listen}"))?;
        println!("listening on http://{}", listener.local_addr().context("local address")?);
        crate::api::serve(engine, listener).await.map_err(|e| Failure::Engine(e.to_string()))
    })
}

fn print_events(engine: &Engine, session: &str, from: &mut u64) -> Result<(), EngineError> {
    for e in engine.events(session, *from)? {
        println!("{}", describe(&e));
        *from = e.sequence + 1;
    }
    Ok(())
}

fn describe(e: &ExecutionEvent) -> String {
    let kind = serde_json::to_value(e.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    let step = e.step_index.map(|i| format!("step {i} ")).unwrap_or_default();
    let detail = match e.payload.get("summary").and_then(Value::as_str) {
        Some(s) => s.to_string(),
        None => canonical::to_canonical_string(&e.payload).unwrap_or_default(),
    };
    format!("[{}] {step}{kind}: {detail}", e.sequence)
}

fn show_interrupt(i: &InterruptRequest) {
    let kind = serde_json::to_value(i.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    println!("approval required: {} ({kind})", i.interrupt_id);
    println!("{}", canonical::to_canonical_pretty(&i.payload).unwrap_or_default());
}

/// Maps a session's resting status to the command outcome.
fn finish(engine: &Engine, session: &str, status: SessionStatus, from: u64) -> Outcome {
    let mut from = from;
    print_events(engine, session, &mut from)?;
    match status {
        SessionStatus::Completed => {
            println!("session {session} completed");
            Ok(())
        }
        SessionStatus::Aborted => {
            let reason = engine.session_record(session)?.abort_reason.unwrap_or_default();
            Err(Failure::Engine(format!("session {session} aborted: {reason}")))
        }
        SessionStatus::PendingApproval | SessionStatus::SuspendedInterrupt => {
            if let Some(i) = engine.pending_interrupt(session)? {
                show_interrupt(&i);
            }
            Err(Failure::User(format!("approval required for session {session}")))
        }
        SessionStatus::Running => Err(Failure::Engine(format!("session {session} stopped while running"))),
    }
}

fn run_task(engine: &Engine, task: &str, session: Option<String>, user: &str) -> Outcome {
    let record = engine.create_session(user, session.as_deref())?;
    let id = record.session_id;
    println!("session {id}");
    let out = engine.post_message(&id, task)?;
    if let Some(reply) = &out.reply {
        println!("{reply}");
    }
    let status = if out.status == SessionStatus::Running { engine.drive(&id)? } else { out.status };
    if out.task.is_none() && status != SessionStatus::Running && out.plan.is_none() && out.reply.is_some() {
        return Err(Failure::User("no actionable task in the message".into()));
    }
    finish(engine, &id, status, 0)
}

fn decide_pending(engine: &Engine, session: &str, verdict: Verdict, by: &str) -> Result<SessionStatus, Failure> {
    let pending = engine
        .pending_interrupt(session)?
        .ok_or_else(|| Failure::User(format!("session {session} has no pending approval")))?;
    let out = engine.resolve(ApprovalDecision::new(&pending.interrupt_id, verdict, by, engine.clock().now()))?;
    Ok(out.status)
}

fn plan(engine: &Engine, action: PlanAction) -> Outcome {
    let (session, status) = match action {
        PlanAction::Show { session } => {
            let plan = engine.plan(&session)?.ok_or_else(|| Failure::User(format!("session {session} has no plan")))?;
            println!("{}", canonical::to_canonical_pretty(&plan).map_err(|e| Failure::Engine(e.to_string()))?);
            return Ok(());
        }
        PlanAction::Edit { session, file, by } => {
            let text = match file {
                Some(p) => std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
                None => {
                    let mut t = String::new();
                    std::io::stdin().read_to_string(&mut t).context("reading stdin")?;
                    t
                }
            };
            let doc: Value = serde_json::from_str(&text).context("plan document is not JSON")?;
            let out = engine.revise_plan(&session, doc, &by, None)?;
            println!("plan revised; session {session} is {}", out.status.as_str());
            return Ok(());
        }
        PlanAction::Approve { session, by } => {
            let s = decide_pending(engine, &session, Verdict::Approve, &by)?;
            (session, s)
        }
        PlanAction::Reject { session, by } => {
            let s = decide_pending(engine, &session, Verdict::Reject, &by)?;
            (session, s)
        }
    };
    let from = engine.events(&session, 0)?.last().map_or(0, |e| e.sequence + 1);
    let status = if status == SessionStatus::Running { engine.drive(&session)? } else { status };
    match status {
        SessionStatus::Aborted => {
            println!("session {session} aborted");
            Ok(())
        }
        other => finish(engine, &session, other, from),
    }
}

fn demo(engine: &Engine, out: PathBuf) -> Outcome {
    let status = if engine.checkpoints().exists(DEMO_SESSION) {
        let record = engine.session_record(DEMO_SESSION)?;
        if record.status.is_terminal() {
            record.status
        } else {
            println!("resuming {DEMO_SESSION}");
            engine.resume(DEMO_SESSION)?
        }
    } else {
        engine.create_session("demo", Some(DEMO_SESSION))?;
        let msg = engine.post_message(DEMO_SESSION, GOLDEN_REQUEST)?;
        if msg.status == SessionStatus::Running {
            engine.drive(DEMO_SESSION)?
        } else {
            msg.status
        }
    };
    finish(engine, DEMO_SESSION, status, 0)?;
    print_report(engine, DEMO_SESSION)?;
    write_bundle(engine, DEMO_SESSION, &out)
}

fn print_report(engine: &Engine, session: &str) -> Result<(), EngineError> {
    for a in engine.artifacts(session)? {
        if a.media_type.starts_with("text/markdown") {
            let (_, bytes) = engine.artifact(&a.artifact_id)?;
            println!();
            println!("{}", String::from_utf8_lossy(&bytes));
        }
    }
    Ok(())
}

fn write_bundle(engine: &Engine, session: &str, out: &Path) -> Outcome {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    engine.write_bundle(session, out)?;
    println!("bundle written to {}", out.display());
    Ok(())
}

fn chat(engine: &Engine, session: Option<String>, user: &str) -> Outcome {
    let id = match session {
        Some(id) if engine.checkpoints().exists(&id) => id,
        other => engine.create_session(user, other.as_deref())?.session_id,
    };
    println!("session {id}. Type a request, or /plan, /quit.");
    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    let mut from = engine.events(&id, 0)?.last().map_or(0, |e| e.sequence + 1);
    loop {
        if let Some(pending) = engine.pending_interrupt(&id)? {
            show_interrupt(&pending);
            prompt("approve? [y/n] ")?;
            let Some(answer) = lines.next() else { return Ok(()) };
            let answer = answer.context("reading stdin")?;
            let verdict = if answer.trim().eq_ignore_ascii_case("y") { Verdict::Approve } else { Verdict::Reject };
            let status = engine.resolve(ApprovalDecision::new(&pending.interrupt_id, verdict, user, engine.clock().now()))?.status;
            if status == SessionStatus::Running {
                engine.drive(&id)?;
            }
            print_events(engine, &id, &mut from)?;
            print_report_if_done(engine, &id)?;
            continue;
        }
        prompt("> ")?;
        let Some(line) = lines.next() else { return Ok(()) };
        let line = line.context("reading stdin")?;
        match line.trim() {
            "" => continue,
            "/quit" => return Ok(()),
            "/plan" => match engine.plan(&id)? {
                Some(p) => println!("{}", canonical::to_canonical_pretty(&p).unwrap_or_default()),
                None => println!("no plan yet"),
            },
            text => {
                let out = match engine.post_message(&id, text) {
                    Ok(o) => o,
                    Err(e @ (EngineError::Conflict(_) | EngineError::InvalidInput(_))) => {
                        println!("{e}");
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                if let Some(reply) = out.reply {
                    println!("{reply}");
                }
                if out.status == SessionStatus::Running {
                    engine.drive(&id)?;
                }
                print_events(engine, &id, &mut from)?;
                print_report_if_done(engine, &id)?;
            }
        }
    }
}

fn print_report_if_done(engine: &Engine, session: &str) -> Result<(), EngineError> {
    if engine.session_record(session)?.status == SessionStatus::Completed {
        print_report(engine, session)?;
    }
    Ok(())
}

fn prompt(text: &str) -> Result<(), Failure> {
    print!("{text}");
    std::io::stdout().flush().map_err(|e| Failure::Engine(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_line_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn parses_plan_and_demo_forms() {
        let cli = Cli::try_parse_from(["planfirst", "--data-dir", "d", "plan", "approve", "s1"]).unwrap();
        assert!(matches!(cli.command, Command::Plan { action: PlanAction::Approve { .. } }));
        let cli = Cli::try_parse_from(["planfirst", "demo", "windfarm", "--lm-script", "f.json", "--out", "b.tar"]).unwrap();
        assert_eq!(cli.global.lm_script, Some(PathBuf::from("f.json")));
        assert!(Cli::try_parse_from(["planfirst", "--clock", "tomorrow", "resume", "s"]).is_err());
    }

    #[test]
    fn engine_errors_map_to_exit_classes() {
        assert!(matches!(Failure::from(EngineError::UnknownSession("x".into())), Failure::User(_)));
        assert!(matches!(Failure::from(EngineError::Io("disk".into())), Failure::Engine(_)));
    }
}
