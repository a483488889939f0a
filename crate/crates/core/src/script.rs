//! Script execution in a child process with file-based data exchange.
//!
//! Job directory layout:
//!
//! ```text
//! <jobs>/<job_id>/
//!   inputs/<TYPE>_<KEY>.csv|json
//!   outputs/<name>.csv|json     written by the script
//!   script.py
//!   result.json
//! ```
//!
//! Tabular schemas travel as CSV with a header row; anything else as JSON.

use crate::canonical;
use crate::context::ContextKey;
use crate::schema::{FieldType, SchemaDescriptor};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use std::fs;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

pub const TAIL_BYTES: usize = 2048;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Local,
    Container,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub wall_clock: Duration,
    pub max_output_bytes: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { wall_clock: Duration::from_secs(60), max_output_bytes: 1 << 20 }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptInput {
    pub key: ContextKey,
    pub schema: SchemaDescriptor,
    pub payload: Value,
}

#[derive(Debug, Clone)]
pub struct ExpectedOutput {
    pub name: String,
    pub schema: SchemaDescriptor,
}

#[derive(Debug, Clone)]
pub struct ScriptJob {
    pub job_id: String,
    pub script_text: String,
    pub inputs: Vec<ScriptInput>,
    pub expected_outputs: Vec<ExpectedOutput>,
    pub backend: Backend,
    pub limits: Limits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptResult {
    pub job_id: String,
    pub exit_status: i32,
    pub outputs: Vec<(String, Value)>,
    pub stdout_tail: String,
    pub stderr_tail: String,
    pub duration_ms: u64,
}

impl ScriptResult {
    pub fn output(&self, name: &str) -> Option<&Value> {
        self.outputs.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScriptError {
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("script exceeded its {0:?} wall-clock limit")]
    Timeout(Duration),
    #[error("script crashed ({status}): {detail}")]
    Crash { status: String, detail: String },
    #[error("output {name} violates its schema: {detail}")]
    OutputSchemaViolation { name: String, detail: String },
    #[error("script backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("job directory io: {0}")]
    Io(String),
}

fn io(e: std::io::Error) -> ScriptError {
    ScriptError::Io(e.to_string())
}

#[derive(Debug, Clone)]
pub struct ScriptService {
    jobs_dir: PathBuf,
    interpreter: Vec<String>,
    container_template: Option<String>,
}

impl ScriptService {
    pub fn new(jobs_dir: impl Into<PathBuf>, interpreter: &str, container_template: Option<String>) -> Self {
        let mut interpreter: Vec<String> = interpreter.split_whitespace().map(String::from).collect();
        if interpreter.is_empty() {
            interpreter.push("python3".into());
        }
        ScriptService { jobs_dir: jobs_dir.into(), interpreter, container_template }
    }

    /// `AB_SCRIPT_INTERPRETER` (default `python3`) and `AB_CONTAINER_RUN`.
    pub fn from_env(data_dir: &Path) -> Self {
        let interp = std::env::var("AB_SCRIPT_INTERPRETER").unwrap_or_else(|_| "python3".into());
        ScriptService::new(data_dir.join("jobs"), &interp, std::env::var("AB_CONTAINER_RUN").ok())
    }

    pub fn job_dir(&self, job_id: &str) -> PathBuf {
        self.jobs_dir.join(job_id)
    }

    pub fn run_script(&self, job: &ScriptJob) -> Result<ScriptResult, ScriptError> {
        validate_job(job)?;
        let dir = self.job_dir(&job.job_id);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io)?;
        }
        fs::create_dir_all(dir.join("inputs")).map_err(io)?;
        fs::create_dir_all(dir.join("outputs")).map_err(io)?;
        for input in &job.inputs {
            let name = format!("{}_{}", input.key.context_type(), input.key.instance_key());
            let (file, bytes) = marshal(&name, &input.schema, &input.payload)?;
            fs::write(dir.join("inputs").join(file), bytes).map_err(io)?;
        }
        fs::write(dir.join("script.py"), &job.script_text).map_err(io)?;

        let argv = self.command_line(&job.backend, &dir)?;
        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..])
            .current_dir(&dir)
            .env_clear()
            .env("PATH", "/usr/local/bin:/usr/bin:/bin")
            .env("HOME", &dir)
            .env("LANG", "C.UTF-8")
            .env("PYTHONHASHSEED", "0")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        let started = Instant::now();
        let mut child = cmd.spawn().map_err(|e| ScriptError::BackendUnavailable(format!("{}: {e}", argv[0])))?;
        let pid = child.id() as i32;
        let total = Arc::new(AtomicUsize::new(0));
        let overflow = Arc::new(AtomicBool::new(false));
        let spawn_reader = |mut pipe: Box<dyn Read + Send>| {
            let total = total.clone();
            let overflow = overflow.clone();
            let limit = job.limits.max_output_bytes;
            thread::spawn(move || {
                let mut tail: Vec<u8> = Vec::new();
                let mut buf = [0u8; 8192];
                while let Ok(n) = pipe.read(&mut buf) {
                    if n == 0 {
                        break;
                    }
                    if total.fetch_add(n, Ordering::SeqCst) + n > limit {
                        overflow.store(true, Ordering::SeqCst);
                    }
                    tail.extend_from_slice(&buf[..n]);
                    if tail.len() > 2 * TAIL_BYTES {
                        tail.drain(..tail.len() - TAIL_BYTES);
                    }
                }
                let start = tail.len().saturating_sub(TAIL_BYTES);
                String::from_utf8_lossy(&tail[start..]).into_owned()
            })
        };
        let out_reader = spawn_reader(Box::new(child.stdout.take().expect("piped stdout")));
        let err_reader = spawn_reader(Box::new(child.stderr.take().expect("piped stderr")));

        let kill_group = || unsafe {
            libc::kill(-pid, libc::SIGKILL);
        };
        let status = loop {
            if let Some(status) = child.try_wait().map_err(io)? {
                break Some(status);
            }
            if overflow.load(Ordering::SeqCst) {
                kill_group();
                let _ = child.wait();
                break None;
            }
            if started.elapsed() >= job.limits.wall_clock {
                kill_group();
                let _ = child.wait();
                let _ = (out_reader.join(), err_reader.join());
                return Err(ScriptError::Timeout(job.limits.wall_clock));
            }
            thread::sleep(Duration::from_millis(10));
        };
        // Descendants may still hold the pipes open.
        kill_group();
        let stdout_tail = out_reader.join().unwrap_or_default();
        let stderr_tail = err_reader.join().unwrap_or_default();
        let duration_ms = started.elapsed().as_millis() as u64;
        let Some(status) = status else {
            return Err(ScriptError::Crash {
                status: "killed".into(),
                detail: format!("output limit exceeded ({} bytes)", job.limits.max_output_bytes),
            });
        };
        if overflow.load(Ordering::SeqCst) {
            return Err(ScriptError::Crash {
                status: "killed".into(),
                detail: format!("output limit exceeded ({} bytes)", job.limits.max_output_bytes),
            });
        }
        let code = status.code().unwrap_or(-1);
        if !status.success() {
            return Err(ScriptError::Crash { status: status.to_string(), detail: stderr_tail });
        }

        let mut outputs = Vec::new();
        for expected in &job.expected_outputs {
            let value = read_output(&dir.join("outputs"), expected)?;
            outputs.push((expected.name.clone(), value));
        }
        let result = ScriptResult { job_id: job.job_id.clone(), exit_status: code, outputs, stdout_tail, stderr_tail, duration_ms };
        let doc = canonical::to_canonical_pretty(&result).map_err(|e| ScriptError::Io(e.to_string()))?;
        fs::write(dir.join("result.json"), doc).map_err(io)?;
        Ok(result)
    }

    fn command_line(&self, backend: &Backend, dir: &Path) -> Result<Vec<String>, ScriptError> {
        match backend {
            Backend::Local => {
                let mut argv = self.interpreter.clone();
                argv.push("script.py".into());
                Ok(argv)
            }
            Backend::Container => {
                let template = self
                    .container_template
                    .as_deref()
                    .ok_or_else(|| ScriptError::BackendUnavailable("AB_CONTAINER_RUN is not set".into()))?;
                let job_dir = dir.to_string_lossy();
                let argv: Vec<String> = template
                    .split_whitespace()
                    .map(|t| t.replace("{job_dir}", &job_dir).replace("{script}", "script.py"))
                    .collect();
                if argv.is_empty() {
                    return Err(ScriptError::BackendUnavailable("AB_CONTAINER_RUN is empty".into()));
                }
                Ok(argv)
            }
        }
    }
}

fn validate_job(job: &ScriptJob) -> Result<(), ScriptError> {
    let ok_id = !job.job_id.is_empty()
        && job.job_id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !job.job_id.starts_with('.');
    if !ok_id {
        return Err(ScriptError::InvalidJob(format!("job id {:?}", job.job_id)));
    }
    if job.limits.wall_clock.is_zero() || job.limits.max_output_bytes == 0 {
        return Err(ScriptError::InvalidJob("limits must be positive".into()));
    }
    if job.expected_outputs.is_empty() {
        return Err(ScriptError::InvalidJob("no expected outputs".into()));
    }
    for o in &job.expected_outputs {
        if o.name.is_empty() || !o.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(ScriptError::InvalidJob(format!("output name {:?}", o.name)));
        }
    }
    Ok(())
}

fn scalar_cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// File name and bytes for one marshalled object.
pub fn marshal(name: &str, schema: &SchemaDescriptor, payload: &Value) -> Result<(String, Vec<u8>), ScriptError> {
    if !schema.is_tabular() {
        let text = canonical::to_canonical_pretty(payload).map_err(|e| ScriptError::Io(e.to_string()))?;
        return Ok((format!("{name}.json"), text.into_bytes()));
    }
    let rows = schema.row_count(payload);
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let header: Vec<&str> = schema.fields.iter().map(|f| f.name.as_str()).collect();
    w.write_record(&header).map_err(|e| ScriptError::Io(e.to_string()))?;
    for r in 0..rows {
        let row: Vec<String> = schema.fields.iter().map(|f| scalar_cell(&payload[&f.name][r])).collect();
        w.write_record(&row).map_err(|e| ScriptError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| ScriptError::Io(e.to_string()))?;
    Ok((format!("{name}.csv"), bytes))
}

fn parse_cell(cell: &str, ty: &FieldType) -> Result<Value, String> {
    match ty {
        FieldType::Text | FieldType::Timestamp => Ok(Value::String(cell.to_string())),
        FieldType::Integer => cell.trim().parse::<i64>().map(Value::from).map_err(|e| format!("{cell:?}: {e}")),
        FieldType::Real => {
            let x: f64 = cell.trim().parse().map_err(|e| format!("{cell:?}: {e}"))?;
            Number::from_f64(x).map(Value::Number).ok_or_else(|| format!("{cell:?} is not finite"))
        }
        FieldType::Boolean => match cell.trim() {
            "true" | "True" | "1" => Ok(Value::Bool(true)),
            "false" | "False" | "0" => Ok(Value::Bool(false)),
            other => Err(format!("{other:?} is not a boolean")),
        },
        other => Err(format!("{other} cannot appear in a CSV cell")),
    }
}

/// Inverse of [`marshal`] for tabular schemas.
pub fn unmarshal_csv(bytes: &[u8], schema: &SchemaDescriptor) -> Result<Value, String> {
    let mut r = csv::ReaderBuilder::new().from_reader(bytes);
    let headers: Vec<String> = r.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
    let mut columns: Vec<Vec<Value>> = vec![Vec::new(); schema.fields.len()];
    let positions: Vec<usize> = schema
        .fields
        .iter()
        .map(|f| headers.iter().position(|h| h == &f.name).ok_or_else(|| format!("missing column {}", f.name)))
        .collect::<Result<_, _>>()?;
    for record in r.records() {
        let record = record.map_err(|e| e.to_string())?;
        for (i, f) in schema.fields.iter().enumerate() {
            let FieldType::Series(inner) = &f.ty else { return Err(format!("{} is not a series", f.name)) };
            let cell = record.get(positions[i]).unwrap_or("");
            columns[i].push(parse_cell(cell, inner).map_err(|e| format!("{}: {e}", f.name))?);
        }
    }
    let mut obj = Map::new();
    for (f, col) in schema.fields.iter().zip(columns) {
        obj.insert(f.name.clone(), Value::Array(col));
    }
    Ok(Value::Object(obj))
}

fn read_output(outputs_dir: &Path, expected: &ExpectedOutput) -> Result<Value, ScriptError> {
    let violation = |detail: String| ScriptError::OutputSchemaViolation { name: expected.name.clone(), detail };
    let tabular = expected.schema.is_tabular();
    let path = outputs_dir.join(format!("{}.{}", expected.name, if tabular { "csv" } else { "json" }));
    let bytes = fs::read(&path).map_err(|e| violation(format!("{} not readable: {e}", path.display())))?;
    let value = if tabular {
        unmarshal_csv(&bytes, &expected.schema).map_err(violation)?
    } else {
        serde_json::from_slice(&bytes).map_err(|e| violation(e.to_string()))?
    };
    expected.schema.validate(&value).map_err(|v| violation(v.to_string()))?;
    Ok(value)
}
