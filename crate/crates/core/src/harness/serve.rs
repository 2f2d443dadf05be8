//! HTTP service hosting concurrent runs with live event streams.
//!
//! Routes:
//! - `POST /runs` starts a run and answers `201 {"run_id": ..}`.
//! - `GET /runs/{id}` reports progress and, once finished, the outcome.
//! - `GET /runs/{id}/events?offset=k` streams events from `k` as NDJSON
//!   until the run finishes.
//! - `GET /runs/{id}/topology?offset=k` returns the fold of the first `k`
//!   events (all events by default) as a topology document.
//! - `GET /runs/{id}/images/{hash}` serves workspace files and sim payloads.
//! - `POST /runs/{id}/control` enqueues a control and answers `202`.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Body;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::watch;

use super::bench::{Harness, TaskInput};
use crate::config::Preset;
use crate::controls::{ChannelControls, Control, ControlSource};
use crate::document;
use crate::events::{fold, Clock, EventRecord};
use crate::image::ImageKind;
use crate::scheduler::{RunOptions, Termination};
use crate::sim::SimTask;
use crate::topology::StateId;

/// Body of `POST /runs`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRequest {
    #[serde(default)]
    pub task: Option<SimTask>,
    #[serde(default)]
    pub image: Option<PathBuf>,
    #[serde(default)]
    pub instruction: Option<String>,
    /// Defaults to the task's edit count.
    #[serde(default)]
    pub complexity: Option<u32>,
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Hold before the first state until a `resume` arrives.
    #[serde(default)]
    pub start_paused: bool,
    /// Pause before every state; each `resume` advances one state.
    #[serde(default)]
    pub step: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run_id: String,
    pub events: usize,
    pub finished: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub termination: Option<Termination>,
    #[serde(default)]
    pub final_states: Vec<StateId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Default)]
struct Outcome {
    termination: Option<Termination>,
    final_states: Vec<StateId>,
    error: Option<String>,
}

struct RunHandle {
    events: RwLock<Vec<EventRecord>>,
    /// (events appended so far, finished)
    progress: watch::Sender<(usize, bool)>,
    controls: Mutex<Option<Sender<Control>>>,
    outcome: Mutex<Outcome>,
}

impl RunHandle {
    fn finished(&self) -> bool {
        self.progress.borrow().1
    }
}

pub struct ServeState {
    harness: Arc<Harness>,
    runs: RwLock<HashMap<String, Arc<RunHandle>>>,
    next_id: AtomicU64,
    token: Option<String>,
}

impl ServeState {
    pub fn new(harness: Harness, token: Option<String>) -> Arc<Self> {
        Arc::new(ServeState {
            harness: Arc::new(harness),
            runs: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            token,
        })
    }

    fn run(&self, id: &str) -> Result<Arc<RunHandle>, ApiError> {
        self.runs
            .read()
            .expect("run table")
            .get(id)
            .cloned()
            .ok_or(ApiError(StatusCode::NOT_FOUND, format!("unknown run {id}")))
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1}))).into_response()
    }
}

/// Injects a pause at every step, or only the first.
struct Stepper {
    inner: ChannelControls,
    every_step: bool,
    first: bool,
}

impl ControlSource for Stepper {
    fn poll(&mut self, step: usize) -> Vec<Control> {
        let mut out = Vec::new();
        if self.every_step || std::mem::take(&mut self.first) {
            out.push(Control::Pause);
        }
        out.extend(self.inner.poll(step));
        out
    }

    fn wait(&mut self) -> Option<Control> {
        self.inner.wait()
    }
}

pub fn router(state: Arc<ServeState>) -> Router {
    Router::new()
        .route("/runs", post(start_run))
        .route("/runs/{id}", get(status))
        .route("/runs/{id}/events", get(events))
        .route("/runs/{id}/topology", get(topology))
        .route("/runs/{id}/images/{hash}", get(image))
        .route("/runs/{id}/control", post(control))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<ServeState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn auth(State(state): State<Arc<ServeState>>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let presented = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError(StatusCode::UNAUTHORIZED, "missing or invalid bearer token".into()).into_response();
        }
    }
    next.run(req).await
}

async fn start_run(
    State(state): State<Arc<ServeState>>,
    Json(req): Json<StartRequest>,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let bad = |m: String| ApiError(StatusCode::UNPROCESSABLE_ENTITY, m);
    let input = match (req.task, req.image) {
        (Some(task), None) => {
            task.validate().map_err(|e| bad(e.to_string()))?;
            TaskInput::Sim(task)
        }
        (None, Some(image)) => TaskInput::Image {
            image,
            instruction: req.instruction.ok_or_else(|| bad("image runs need an instruction".into()))?,
        },
        _ => return Err(bad("give exactly one of task or image".into())),
    };
    let complexity = match (&input, req.complexity) {
        (_, Some(c)) => c,
        (TaskInput::Sim(t), None) => t.complexity(),
        (TaskInput::Image { .. }, None) => return Err(bad("complexity is required for image runs".into())),
    };
    let harness = state.harness.clone();
    let cfg = harness.run_config(complexity, req.preset).map_err(|e| bad(e.to_string()))?;
    let n = state.next_id.fetch_add(1, Ordering::Relaxed);
    let run_id = format!("run-{n}");
    let seed = req.seed.unwrap_or_else(|| harness.entry_seed(n as usize));
    let (backends, image, instruction) = harness.prepare(&input, &cfg, seed).map_err(|e| bad(e.to_string()))?;

    let (tx, rx) = mpsc::channel();
    let (progress, _) = watch::channel((0usize, false));
    let handle = Arc::new(RunHandle {
        events: RwLock::new(Vec::new()),
        progress,
        controls: Mutex::new(Some(tx)),
        outcome: Mutex::new(Outcome::default()),
    });
    state
        .runs
        .write()
        .expect("run table")
        .insert(run_id.clone(), handle.clone());

    let opts = RunOptions {
        run_id: run_id.clone(),
        clock: Clock::Wall,
    };
    tokio::task::spawn_blocking(move || {
        let mut controls = Stepper {
            inner: ChannelControls::new(rx),
            every_step: req.step,
            first: req.start_paused,
        };
        let sink_handle = handle.clone();
        let mut sink = move |e: &EventRecord| {
            let mut log = sink_handle.events.write().expect("event log");
            log.push(e.clone());
            let n = log.len();
            drop(log);
            sink_handle.progress.send_replace((n, false));
        };
        let result = crate::scheduler::run(image, &instruction, &backends, &cfg, &mut controls, &mut sink, &opts);
        let mut outcome = handle.outcome.lock().expect("outcome");
        match result {
            Ok(r) => {
                outcome.termination = Some(r.termination);
                outcome.final_states = r.final_states;
            }
            Err(e) => outcome.error = Some(e.to_string()),
        }
        drop(outcome);
        handle.controls.lock().expect("controls").take();
        let n = handle.events.read().expect("event log").len();
        handle.progress.send_replace((n, true));
    });
    Ok((StatusCode::CREATED, Json(json!({"run_id": run_id}))))
}

async fn status(State(state): State<Arc<ServeState>>, Path(id): Path<String>) -> Result<Json<RunStatus>, ApiError> {
    let run = state.run(&id)?;
    let (events, finished) = *run.progress.borrow();
    let outcome = run.outcome.lock().expect("outcome");
    Ok(Json(RunStatus {
        run_id: id,
        events,
        finished,
        termination: outcome.termination,
        final_states: outcome.final_states.clone(),
        error: outcome.error.clone(),
    }))
}

#[derive(Debug, Deserialize)]
struct OffsetQuery {
    #[serde(default)]
    offset: Option<usize>,
}

fn ndjson(events: &[EventRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for e in events {
        serde_json::to_writer(&mut out, e).expect("event serializes");
        out.push(b'\n');
    }
    out
}

async fn events(
    State(state): State<Arc<ServeState>>,
    Path(id): Path<String>,
    Query(q): Query<OffsetQuery>,
) -> Result<Response, ApiError> {
    let run = state.run(&id)?;
    let rx = run.progress.subscribe();
    let start = q.offset.unwrap_or(0);
    let stream = futures_util::stream::unfold((run, rx, start, false), |(run, mut rx, sent, done)| async move {
        if done {
            return None;
        }
        loop {
            let (available, finished) = *rx.borrow_and_update();
            if available > sent {
                let chunk = {
                    let log = run.events.read().expect("event log");
                    ndjson(&log[sent..available])
                };
                return Some((Ok::<_, std::io::Error>(chunk), (run, rx, available, false)));
            }
            if finished {
                return None;
            }
            if rx.changed().await.is_err() {
                return None;
            }
        }
    });
    Ok(Response::builder()
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .body(Body::from_stream(stream))
        .expect("valid response"))
}

async fn topology(
    State(state): State<Arc<ServeState>>,
    Path(id): Path<String>,
    Query(q): Query<OffsetQuery>,
) -> Result<Response, ApiError> {
    let run = state.run(&id)?;
    let log = run.events.read().expect("event log");
    let k = q.offset.unwrap_or(log.len()).min(log.len());
    let topo = fold(&log[..k]).map_err(|e| ApiError(StatusCode::CONFLICT, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], document::to_bytes(&topo)).into_response())
}

async fn image(
    State(state): State<Arc<ServeState>>,
    Path((id, hash)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let run = state.run(&id)?;
    let topo = {
        let log = run.events.read().expect("event log");
        fold(&log).map_err(|e| ApiError(StatusCode::CONFLICT, e.to_string()))?
    };
    let found = topo
        .iter()
        .flat_map(|s| [&s.input, &s.output])
        .find(|r| r.id == hash)
        .cloned()
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no image {hash} in run {id}")))?;
    match found.kind {
        ImageKind::Sim => Ok(([(header::CONTENT_TYPE, "application/json")], found.locator).into_response()),
        ImageKind::File => {
            let bytes = state
                .harness
                .store
                .read(&found)
                .map_err(|e| ApiError(StatusCode::NOT_FOUND, e.to_string()))?;
            let mime = match found.locator.rsplit('.').next() {
                Some("png") => "image/png",
                Some("jpg") | Some("jpeg") => "image/jpeg",
                _ => "application/octet-stream",
            };
            Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
        }
    }
}

async fn control(
    State(state): State<Arc<ServeState>>,
    Path(id): Path<String>,
    Json(c): Json<Control>,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let run = state.run(&id)?;
    let finished = || ApiError(StatusCode::CONFLICT, format!("run {id} has finished"));
    if run.finished() {
        return Err(finished());
    }
    let guard = run.controls.lock().expect("controls");
    let tx = guard.as_ref().ok_or_else(finished)?;
    tx.send(c).map_err(|_| finished())?;
    Ok((StatusCode::ACCEPTED, Json(json!({"accepted": true}))))
}
