#![allow(dead_code)]

use planfirst_core::engine::Engine;
use planfirst_server::api;
use planfirst_server::app::{parse_date, Settings};
use planfirst_windfarm::Pack;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::{Duration, Instant};

pub const BIN: &str = env!("CARGO_BIN_EXE_planfirst");

pub fn fixture_path() -> PathBuf {
    Pack::load_default().unwrap().fixture_path()
}

/// Scripted backend, reference clock, oracle checks on.
pub fn settings(dir: &Path, planning: bool) -> Settings {
    Settings {
        data_dir: dir.to_path_buf(),
        lm_script: Some(fixture_path()),
        clock: Some(parse_date("2025-08-09").unwrap()),
        planning_mode: Some(planning),
        verify: true,
        ..Settings::default()
    }
}

pub struct Server {
    pub base: String,
    pub engine: Arc<Engine>,
}

impl Server {
    pub fn start(settings: &Settings) -> Server {
        let engine = Arc::new(settings.engine().unwrap());
        let (tx, rx) = std::sync::mpsc::channel();
        let served = engine.clone();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                tx.send(listener.local_addr().unwrap()).unwrap();
                api::serve(served, listener).await.unwrap();
            });
        });
        let addr = rx.recv().unwrap();
        Server { base: format!("http://{addr}"), engine }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

pub fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder().timeout(Duration::from_secs(60)).build().unwrap()
}

/// Polls `GET /sessions/{id}` until the status leaves `running`.
pub fn settle(server: &Server, session: &str) -> serde_json::Value {
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let record: serde_json::Value = client().get(server.url(&format!("/sessions/{session}"))).send().unwrap().json().unwrap();
        assert!(record.get("status").is_some(), "{record}");
        if record["status"] != "running" {
            return record;
        }
        assert!(Instant::now() < deadline, "session {session} did not settle");
        std::thread::sleep(Duration::from_millis(20));
    }
}

pub fn planfirst(data_dir: &Path, args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.arg("--data-dir").arg(data_dir).args(args);
    cmd.env_remove("AB_CRASH_AFTER_CHECKPOINT").env_remove("AB_PLANNING_MODE");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// `(id, event, data)` frames of a finished event stream.
pub fn sse_frames(body: &str) -> Vec<(u64, String, serde_json::Value)> {
    let mut frames = Vec::new();
    for block in body.split("\n\n") {
        let (mut id, mut event, mut data) = (None, String::new(), String::new());
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("id:") {
                id = v.trim().parse().ok();
            } else if let Some(v) = line.strip_prefix("event:") {
                event = v.trim().to_string();
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push_str(v.trim_start());
            }
        }
        if let Some(id) = id {
            frames.push((id, event, serde_json::from_str(&data).unwrap()));
        }
    }
    frames
}
