//! HTTP API, mounted under both `/api` and `/api/v1`.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/health` | model info and the advertised `alpha_max` |
//! | GET | `/traits` | the five trait descriptors |
//! | GET | `/directions?trait=&position=&method=&layer=` | fitted directions |
//! | POST | `/generate` | steered generation, optional baseline and SSE |
//! | POST | `/sweep` | forced-choice alpha sweep job |
//! | GET | `/sweep/{id}` | job status and result |
//!
//! Errors are `{"error": {"code", "message"}}` with 400 for invalid
//! requests, 404 for unknown jobs, 429 when the generation queue is full and
//! 503 when the backend fails.

use std::collections::HashMap;
use std::convert::Infallible;
use std::future::Future;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream;
use persona_probe::activations::Position;
use persona_probe::chat::{ChatMessage, Decoding};
use persona_probe::directions::{DirectionSet, Method, TraitDirection};
use persona_probe::steering::{alpha_sweep, linear_grid, validate_grid, ForcedChoiceTask, SteeringEntry, SteeringSpec, SweepResult};
use persona_probe::{ActivationBackend, Error, TokenPolicy, Trait};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{OwnedSemaphorePermit, Semaphore};

pub const API_VERSION: &str = "persona-probe/api/1";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub alpha_max: f64,
    /// Requests allowed to wait for a generation slot.
    pub queue_capacity: usize,
    /// Default `max_tokens` for `/generate`.
    pub max_tokens: usize,
    /// Run sweeps inside the creating request (fast local backends).
    pub inline_sweeps: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            alpha_max: persona_probe::steering::DEFAULT_ALPHA_MAX,
            queue_capacity: 32,
            max_tokens: 128,
            inline_sweeps: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum JobState {
    Queued,
    Running,
    Done { result: Box<SweepResult> },
    Failed { error: ErrorBody },
}

#[derive(Debug, Clone, Serialize)]
struct ErrorBody {
    code: String,
    message: String,
}

pub struct AppState {
    backend: Arc<dyn ActivationBackend>,
    directions: Arc<DirectionSet>,
    cfg: ServiceConfig,
    slots: Arc<Semaphore>,
    waiting: AtomicUsize,
    jobs: Mutex<HashMap<String, JobState>>,
    next_job: AtomicU64,
}

impl AppState {
    pub fn new(backend: Arc<dyn ActivationBackend>, directions: Arc<DirectionSet>, cfg: ServiceConfig) -> Arc<Self> {
        // A backend that is not safe for concurrent calls gets one slot and a
        // FIFO queue in front of it.
        let slots = if backend.concurrent_safe() {
            std::thread::available_parallelism().map_or(4, |n| n.get())
        } else {
            1
        };
        Arc::new(AppState {
            backend,
            directions,
            cfg,
            slots: Arc::new(Semaphore::new(slots)),
            waiting: AtomicUsize::new(0),
            jobs: Mutex::new(HashMap::new()),
            next_job: AtomicU64::new(1),
        })
    }

    async fn acquire(&self) -> Result<OwnedSemaphorePermit, ApiError> {
        if let Ok(p) = self.slots.clone().try_acquire_owned() {
            return Ok(p);
        }
        if self.waiting.fetch_add(1, Ordering::SeqCst) >= self.cfg.queue_capacity {
            self.waiting.fetch_sub(1, Ordering::SeqCst);
            return Err(ApiError::new(StatusCode::TOO_MANY_REQUESTS, "QUEUE_FULL", "generation queue is full"));
        }
        // tokio's semaphore hands out permits in request order.
        let permit = self.slots.clone().acquire_owned().await;
        self.waiting.fetch_sub(1, Ordering::SeqCst);
        permit.map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "SHUTTING_DOWN", "service is shutting down"))
    }

    fn set_job(&self, id: &str, state: JobState) {
        self.jobs.lock().expect("job table").insert(id.to_string(), state);
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "BAD_REQUEST", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Backend(_) | Error::EmptyGeneration => StatusCode::SERVICE_UNAVAILABLE,
            Error::Io { .. } | Error::Json(_) | Error::CorruptPayload(_) | Error::SchemaMismatch(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.body}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/traits", get(traits))
        .route("/directions", get(directions))
        .route("/generate", post(generate))
        .route("/sweep", post(create_sweep))
        .route("/sweep/{id}", get(sweep_status))
        .with_state(state);
    Router::new().nest("/api/v1", api.clone()).nest("/api", api)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    log::info!("shutting down");
}

async fn health(State(s): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "api_version": API_VERSION,
        "model_id": s.backend.model_id(),
        "layer_count": s.backend.layer_count(),
        "hidden_dim": s.backend.hidden_dim(),
        "alpha_max": s.cfg.alpha_max,
        "queue_capacity": s.cfg.queue_capacity,
        "directions": s.directions.entries.len(),
    }))
}

async fn traits(State(s): State<Arc<AppState>>) -> Json<Value> {
    let list: Vec<Value> = Trait::ALL
        .iter()
        .map(|t| {
            let layers: Vec<u32> = s
                .directions
                .entries
                .iter()
                .filter(|e| e.trait_ == *t && e.instruction_id.is_none())
                .map(|e| e.layer)
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            json!({"code": t.code(), "name": t.display_name(), "index": t.index(), "layers": layers})
        })
        .collect();
    Json(json!({"alpha_max": s.cfg.alpha_max, "traits": list}))
}

#[derive(Debug, Deserialize)]
struct DirectionQuery {
    #[serde(rename = "trait")]
    trait_: Option<String>,
    position: Option<String>,
    method: Option<String>,
    layer: Option<u32>,
}

async fn directions(State(s): State<Arc<AppState>>, q: Result<Query<DirectionQuery>, QueryRejection>) -> ApiResult<Json<Value>> {
    let Query(q) = q?;
    let t: Option<Trait> = q.trait_.as_deref().map(str::parse).transpose()?;
    let p: Option<Position> = q.position.as_deref().map(str::parse).transpose()?;
    let m: Option<Method> = q.method.as_deref().map(str::parse).transpose()?;
    let entries: Vec<&TraitDirection> = s
        .directions
        .entries
        .iter()
        .filter(|e| t.is_none_or(|t| e.trait_ == t))
        .filter(|e| p.is_none_or(|p| e.position == p))
        .filter(|e| m.is_none_or(|m| e.method == m))
        .filter(|e| q.layer.is_none_or(|l| e.layer == l))
        .collect();
    Ok(Json(json!({
        "schema_version": s.directions.schema_version,
        "model_id": s.directions.model_id,
        "entries": entries,
    })))
}

#[derive(Debug, Deserialize)]
struct GenerateRequest {
    messages: Vec<ChatMessage>,
    #[serde(default)]
    steering: Vec<SteeringEntry>,
    max_tokens: Option<usize>,
    #[serde(default)]
    stream: bool,
    #[serde(default)]
    compare: bool,
    temperature: Option<f32>,
    seed: Option<u64>,
    token_policy: Option<TokenPolicy>,
    position: Option<Position>,
    method: Option<Method>,
    #[serde(default)]
    normalize: bool,
}

#[derive(Debug, Serialize)]
struct GenerateResponse {
    model_id: String,
    text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline: Option<String>,
    applied: SteeringSpec,
    decoding: Decoding,
}

async fn generate(State(s): State<Arc<AppState>>, body: Result<Json<GenerateRequest>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = body?;
    if req.messages.is_empty() {
        return Err(ApiError::bad_request("messages must not be empty"));
    }
    let defaults = SteeringSpec::default();
    let spec = SteeringSpec {
        entries: req.steering,
        token_policy: req.token_policy.unwrap_or(defaults.token_policy),
        position: req.position.unwrap_or(defaults.position),
        method: req.method.unwrap_or(defaults.method),
        normalize: req.normalize,
        alpha_max: s.cfg.alpha_max,
        allow_unsafe_alpha: false,
    };
    let interventions = spec.interventions(&s.directions, s.backend.layer_count(), s.backend.hidden_dim())?;
    let decoding = Decoding {
        max_tokens: req.max_tokens.unwrap_or(s.cfg.max_tokens),
        temperature: req.temperature.unwrap_or(0.0),
        seed: req.seed.unwrap_or(0),
    };

    let permit = s.acquire().await?;
    let backend = s.backend.clone();
    let messages = req.messages;
    let compare = req.compare;
    let (text, baseline) = tokio::task::spawn_blocking(move || -> persona_probe::Result<_> {
        let _permit = permit;
        let text = backend.generate_with_injection(&messages, &interventions, &decoding)?;
        let baseline = if compare { Some(backend.generate(&messages, &decoding)?) } else { None };
        Ok((text, baseline))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string()))??;

    let resp = GenerateResponse {
        model_id: s.backend.model_id().to_string(),
        text,
        baseline,
        applied: spec,
        decoding,
    };
    if !req.stream {
        return Ok(Json(resp).into_response());
    }
    let mut events: Vec<Result<Event, Infallible>> = split_tokens(&resp.text)
        .into_iter()
        .map(|piece| Ok(Event::default().event("token").data(json!({"text": piece}).to_string())))
        .collect();
    let done = serde_json::to_string(&resp).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string()))?;
    events.push(Ok(Event::default().event("done").data(done)));
    Ok(Sse::new(stream::iter(events)).into_response())
}

/// Whitespace-preserving pieces: each carries its leading separator, so the
/// pieces concatenate back to `text`.
fn split_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                out.push(&text[start..i]);
                start = i;
                in_word = false;
            }
        } else {
            in_word = true;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

#[derive(Debug, Deserialize)]
struct SweepRequest {
    #[serde(rename = "trait", default = "default_trait")]
    trait_: Trait,
    grid: Option<Vec<f64>>,
    grid_min: Option<f64>,
    grid_max: Option<f64>,
    steps: Option<usize>,
    #[serde(default = "one")]
    repeats: usize,
    persona: Option<String>,
    position: Option<Position>,
    method: Option<Method>,
    token_policy: Option<TokenPolicy>,
    #[serde(default)]
    normalize: bool,
    layers: Option<Vec<u32>>,
    #[serde(default)]
    seed: u64,
    max_tokens: Option<usize>,
}

fn default_trait() -> Trait {
    Trait::Extraversion
}

fn one() -> usize {
    1
}

async fn create_sweep(State(s): State<Arc<AppState>>, body: Result<Json<SweepRequest>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = body?;
    let grid = match req.grid {
        Some(g) => g,
        None => linear_grid(
            req.grid_min.unwrap_or(-s.cfg.alpha_max),
            req.grid_max.unwrap_or(s.cfg.alpha_max),
            req.steps.unwrap_or(9),
        )?,
    };
    validate_grid(&grid, s.cfg.alpha_max, false)?;
    if req.repeats == 0 {
        return Err(ApiError::bad_request("repeats must be at least 1"));
    }
    let mut task = ForcedChoiceTask::extraversion();
    if task.trait_ != req.trait_ {
        return Err(ApiError::bad_request(format!("no forced-choice statements bundled for {}", req.trait_)));
    }
    task = task.with_seed(req.seed);
    if let Some(p) = req.persona {
        task = task.with_persona(p);
    }
    let defaults = SteeringSpec::default();
    let template = SteeringSpec {
        entries: vec![SteeringEntry {
            trait_: req.trait_,
            alpha: 0.0,
            layers: req.layers,
        }],
        token_policy: req.token_policy.unwrap_or(defaults.token_policy),
        position: req.position.unwrap_or(defaults.position),
        method: req.method.unwrap_or(defaults.method),
        normalize: req.normalize,
        alpha_max: s.cfg.alpha_max,
        allow_unsafe_alpha: false,
    };
    // Catch missing directions before a job is created.
    template.interventions(&s.directions, s.backend.layer_count(), s.backend.hidden_dim())?;
    let decoding = Decoding {
        max_tokens: req.max_tokens.unwrap_or(s.cfg.max_tokens),
        ..Decoding::default()
    };

    let id = format!("sweep-{}", s.next_job.fetch_add(1, Ordering::SeqCst));
    s.set_job(&id, JobState::Queued);
    let repeats = req.repeats;
    let run = {
        let s = s.clone();
        let id = id.clone();
        async move {
            let Ok(permit) = s.slots.clone().acquire_owned().await else {
                return;
            };
            s.set_job(&id, JobState::Running);
            let worker = s.clone();
            let outcome = tokio::task::spawn_blocking(move || {
                let _permit = permit;
                alpha_sweep(worker.backend.as_ref(), &task, &worker.directions, &template, &grid, repeats, &decoding)
            })
            .await;
            let state = match outcome {
                Ok(Ok(result)) => JobState::Done { result: Box::new(result) },
                Ok(Err(e)) => JobState::Failed {
                    error: ErrorBody {
                        code: e.code().into(),
                        message: e.to_string(),
                    },
                },
                Err(e) => JobState::Failed {
                    error: ErrorBody {
                        code: "INTERNAL".into(),
                        message: e.to_string(),
                    },
                },
            };
            s.set_job(&id, state);
        }
    };
    if s.cfg.inline_sweeps {
        run.await;
    } else {
        tokio::spawn(run);
    }
    let status = job_json(&s, &id).unwrap_or(Value::Null);
    Ok((StatusCode::ACCEPTED, Json(status)).into_response())
}

fn job_json(s: &AppState, id: &str) -> Option<Value> {
    let jobs = s.jobs.lock().expect("job table");
    let state = jobs.get(id)?;
    let mut v = serde_json::to_value(state).ok()?;
    v["job_id"] = json!(id);
    Some(v)
}

async fn sweep_status(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    job_json(&s, &id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "NOT_FOUND", format!("no sweep job `{id}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_pieces_concatenate() {
        for text in ["", "one", "one two", " lead\nand  trail ", "- a\n- b"] {
            assert_eq!(split_tokens(text).concat(), text);
        }
        assert_eq!(split_tokens("a b\nc"), vec!["a", " b", "\nc"]);
    }
}
