//! HTTP surface over one engine.
//!
//! Engine calls block (model calls, scripts), so every handler hops onto the
//! blocking pool. Runs continue in the background after a message or a
//! decision leaves the session running; clients follow them on the event
//! stream.

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use parking_lot::Mutex;
use planfirst_core::approval::{ApprovalDecision, ApprovalError, Verdict};
use planfirst_core::artifacts::ArtifactError;
use planfirst_core::canonical;
use planfirst_core::engine::{Engine, EngineError};
use planfirst_core::executor::{ExecutionEvent, SessionStatus};
use serde::Deserialize;
use serde_json::{json, Value};
use std::collections::{HashMap, VecDeque};
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

const POLL: Duration = Duration::from_millis(50);

pub struct AppState {
    pub engine: Arc<Engine>,
    replies: Mutex<HashMap<(String, String), (StatusCode, Value)>>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>) -> Arc<Self> {
        Arc::new(AppState { engine, replies: Mutex::new(HashMap::new()) })
    }
}

type Shared = Arc<AppState>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, body: json!({"error": message.into()}) }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        use StatusCode as S;
        let status = match &e {
            EngineError::UnknownSession(_) => S::NOT_FOUND,
            EngineError::SessionExists(_) | EngineError::Conflict(_) | EngineError::NotTerminal(_) => S::CONFLICT,
            EngineError::InvalidInput(_) => S::BAD_REQUEST,
            EngineError::Approval(a) => match a {
                ApprovalError::UnknownInterrupt(_) => S::NOT_FOUND,
                ApprovalError::AlreadyResolved(_) | ApprovalError::InterruptAlreadyPending(_) => S::CONFLICT,
                ApprovalError::InvalidEdit(_) | ApprovalError::EditNotAllowed | ApprovalError::MalformedDecision(_) => {
                    S::BAD_REQUEST
                }
                ApprovalError::Io(_) => S::INTERNAL_SERVER_ERROR,
            },
            EngineError::Artifact(ArtifactError::UnknownArtifact(_)) => S::NOT_FOUND,
            _ => S::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({"error": e.to_string()});
        if let EngineError::Approval(ApprovalError::InvalidEdit(defects)) = &e {
            body["defects"] = serde_json::to_value(defects).unwrap_or(Value::Null);
        }
        ApiError { status, body }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type Reply = Result<(StatusCode, Json<Value>), ApiError>;

/// Parses a JSON body; any shape error is a 400.
fn body<T: serde::de::DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, EngineError> + Send + 'static) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}"))),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("response serializes")
}

/// Request id from the `Idempotency-Key` header or the body.
fn request_id(headers: &HeaderMap, body: Option<&str>) -> Option<String> {
    headers
        .get("idempotency-key")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
        .or_else(|| body.map(str::to_string))
        .filter(|s| !s.is_empty())
}

/// Replays the stored reply for a repeated `(route, request id)`.
async fn idempotent<F, Fut>(state: &Shared, route: String, rid: Option<String>, run: F) -> Reply
where
    F: FnOnce() -> Fut,
    Fut: std::future::Future<Output = Reply>,
{
    let Some(rid) = rid else { return run().await };
    let key = (route, rid);
    if let Some((status, body)) = state.replies.lock().get(&key).cloned() {
        return Ok((status, Json(body)));
    }
    let reply = run().await;
    let stored = match &reply {
        Ok((s, Json(b))) => Some((*s, b.clone())),
        Err(e) if e.status.is_client_error() => Some((e.status, e.body.clone())),
        Err(_) => None,
    };
    if let Some(s) = stored {
        state.replies.lock().insert(key, s);
    }
    match reply {
        Err(e) if e.status.is_client_error() => Err(e),
        other => other,
    }
}

fn continue_in_background(state: &Shared, session_id: String, status: SessionStatus) {
    if status != SessionStatus::Running {
        return;
    }
    let engine = state.engine.clone();
    tokio::task::spawn_blocking(move || {
        if let Err(e) = engine.drive(&session_id) {
            tracing::error!(session = %session_id, error = %e, "background run failed");
        }
    });
}

#[derive(Debug, Default, Deserialize)]
struct CreateSession {
    user_id: Option<String>,
    session_id: Option<String>,
    request_id: Option<String>,
}

async fn create_session(State(state): State<Shared>, headers: HeaderMap, raw: Bytes) -> Reply {
    let body: CreateSession = if raw.iter().all(u8::is_ascii_whitespace) { CreateSession::default() } else { body(&raw)? };
    let rid = request_id(&headers, body.request_id.as_deref());
    let engine = state.engine.clone();
    idempotent(&state, "create_session".into(), rid, || async move {
        let user = body.user_id.unwrap_or_else(|| "operator".into());
        let record = blocking(move || engine.create_session(&user, body.session_id.as_deref())).await?;
        Ok((StatusCode::CREATED, Json(to_json(&record))))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct PostMessage {
    text: String,
    request_id: Option<String>,
}

async fn post_message(
    State(state): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    raw: Bytes,
) -> Reply {
    let body: PostMessage = body(&raw)?;
    let rid = request_id(&headers, body.request_id.as_deref());
    let engine = state.engine.clone();
    let st = state.clone();
    idempotent(&state, format!("messages:{id}"), rid, || async move {
        let sid = id.clone();
        let out = blocking(move || engine.post_message(&sid, &body.text)).await?;
        continue_in_background(&st, id, out.status);
        Ok((StatusCode::OK, Json(to_json(&out))))
    })
    .await
}

async fn get_session(State(state): State<Shared>, Path(id): Path<String>) -> Reply {
    let engine = state.engine.clone();
    let record = blocking(move || engine.session_record(&id)).await?;
    Ok((StatusCode::OK, Json(to_json(&record))))
}

async fn get_plan(State(state): State<Shared>, Path(id): Path<String>) -> Reply {
    let engine = state.engine.clone();
    let sid = id.clone();
    match blocking(move || engine.plan(&sid)).await? {
        Some(plan) => Ok((StatusCode::OK, Json(to_json(&plan)))),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, format!("session {id} has no plan"))),
    }
}

#[derive(Debug, Deserialize)]
struct RevisePlan {
    document: Value,
    decided_by: Option<String>,
    request_id: Option<String>,
}

async fn revise_plan(
    State(state): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    raw: Bytes,
) -> Reply {
    let body: RevisePlan = body(&raw)?;
    let rid = request_id(&headers, body.request_id.as_deref());
    let engine = state.engine.clone();
    let st = state.clone();
    let route = format!("revise:{id}");
    idempotent(&state, route, rid.clone(), || async move {
        let by = body.decided_by.unwrap_or_else(|| "operator".into());
        let sid = id.clone();
        let out = blocking(move || engine.revise_plan(&sid, body.document, &by, rid)).await?;
        continue_in_background(&st, id, out.status);
        Ok((StatusCode::OK, Json(to_json(&out))))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct Decision {
    verdict: Verdict,
    edited_payload: Option<Value>,
    decided_by: Option<String>,
    request_id: Option<String>,
}

async fn decide(
    State(state): State<Shared>,
    Path(interrupt_id): Path<String>,
    headers: HeaderMap,
    raw: Bytes,
) -> Reply {
    let body: Decision = body(&raw)?;
    let rid = request_id(&headers, body.request_id.as_deref());
    let Some(session_id) = planfirst_core::approval::session_of(&interrupt_id).map(str::to_string) else {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown interrupt {interrupt_id}")));
    };
    let engine = state.engine.clone();
    let st = state.clone();
    idempotent(&state, format!("decision:{interrupt_id}"), rid.clone(), || async move {
        let at = engine.clock().now();
        let mut decision =
            ApprovalDecision::new(&interrupt_id, body.verdict, body.decided_by.unwrap_or_else(|| "operator".into()), at);
        decision.edited_payload = body.edited_payload;
        decision.request_id = rid;
        let out = blocking(move || engine.resolve(decision)).await?;
        continue_in_background(&st, session_id, out.status);
        Ok((StatusCode::OK, Json(to_json(&out))))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    from: Option<u64>,
}

fn wants_stream(headers: &HeaderMap) -> bool {
    headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("text/event-stream"))
}

async fn events(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    // Last-Event-ID carries the last delivered sequence.
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok())
        .map(|s| s + 1);
    let from = resume.or(q.from).unwrap_or(0);
    let engine = state.engine.clone();
    let sid = id.clone();
    let initial = blocking(move || engine.events(&sid, from)).await?;
    if !wants_stream(&headers) {
        return Ok(Json(initial).into_response());
    }
    let stream = event_stream(state.engine.clone(), id, from, initial);
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()).into_response())
}

struct Feed {
    engine: Arc<Engine>,
    session_id: String,
    next: u64,
    buffer: VecDeque<ExecutionEvent>,
    done: bool,
}

fn sse_event(e: &ExecutionEvent) -> Event {
    let data = canonical::to_canonical_string(e).expect("event serializes");
    let kind = serde_json::to_value(e.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    Event::default().id(e.sequence.to_string()).event(kind).data(data)
}

/// Delivers every event from `from` on, in order, and ends once the session
/// is terminal and drained.
fn event_stream(
    engine: Arc<Engine>,
    session_id: String,
    from: u64,
    initial: Vec<ExecutionEvent>,
) -> impl Stream<Item = Result<Event, Infallible>> {
    let next = initial.last().map_or(from, |e| e.sequence + 1);
    let feed = Feed { engine, session_id, next, buffer: initial.into(), done: false };
    stream::unfold(feed, |mut feed| async move {
        loop {
            if let Some(e) = feed.buffer.pop_front() {
                return Some((Ok(sse_event(&e)), feed));
            }
            if feed.done {
                return None;
            }
            let (engine, sid, next) = (feed.engine.clone(), feed.session_id.clone(), feed.next);
            let polled = tokio::task::spawn_blocking(move || {
                let terminal = engine.session_record(&sid).map(|r| r.status.is_terminal()).unwrap_or(true);
                // Read after the status so a terminal session has nothing left behind.
                engine.events(&sid, next).map(|ev| (ev, terminal))
            })
            .await;
            match polled {
                Ok(Ok((fresh, terminal))) => {
                    if let Some(last) = fresh.last() {
                        feed.next = last.sequence + 1;
                    }
                    feed.buffer.extend(fresh);
                    feed.done = terminal;
                    if feed.buffer.is_empty() && !terminal {
                        tokio::time::sleep(POLL).await;
                    }
                }
                _ => feed.done = true,
            }
        }
    })
}

async fn list_artifacts(State(state): State<Shared>, Path(id): Path<String>) -> Reply {
    let engine = state.engine.clone();
    let list = blocking(move || engine.artifacts(&id)).await?;
    Ok((StatusCode::OK, Json(to_json(&list))))
}

async fn get_artifact(State(state): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let engine = state.engine.clone();
    let (meta, bytes) = blocking(move || engine.artifact(&id)).await?;
    Ok(([(header::CONTENT_TYPE, meta.media_type)], Body::from(bytes)).into_response())
}

async fn get_bundle(State(state): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let engine = state.engine.clone();
    let name = format!("attachment; filename=\"{id}.tar\"");
    let bytes = blocking(move || engine.export_bundle(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-tar".to_string()), (header::CONTENT_DISPOSITION, name)], Body::from(bytes))
        .into_response())
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/plan", get(get_plan))
        .route("/sessions/{id}/plan:revise", post(revise_plan))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/artifacts", get(list_artifacts))
        .route("/sessions/{id}/bundle", get(get_bundle))
        .route("/interrupts/{id}/decision", post(decide))
        .route("/artifacts/{id}", get(get_artifact))
        .with_state(state)
}

/// Serves until the listener fails or ctrl-c.
pub async fn serve(engine: Arc<Engine>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    let app = router(AppState::new(engine));
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
