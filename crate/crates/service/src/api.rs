//! REST routes over the engine.

use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use compositor::agents::{AgentBackend, HttpBackend, HttpBackendConfig, ScenarioScript, ScriptedBackend};
use compositor::catalogue::{Actor, CatalogueError, DocumentId, NewMetadata, VisibilityLevel};
use compositor::metrics::MetricsReport;
use compositor::workflow::{Engine, ProjectId, WorkflowConfig, WorkflowError};
use futures::Stream;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Supplies a fresh agent backend for each new project.
pub trait BackendFactory: Send + Sync {
    fn backend(&self, request: &StartRequest) -> Result<Box<dyn AgentBackend>, String>;
}

/// Scripted agents from the request's inline script, else a default script.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackends {
    pub default: Option<ScenarioScript>,
}

impl BackendFactory for ScriptedBackends {
    fn backend(&self, request: &StartRequest) -> Result<Box<dyn AgentBackend>, String> {
        let script = request
            .script
            .clone()
            .or_else(|| self.default.clone())
            .ok_or("no script in the request and no default scenario configured")?;
        Ok(Box::new(ScriptedBackend::new(script)))
    }
}

#[derive(Debug, Clone)]
pub struct HttpBackends(pub HttpBackendConfig);

impl BackendFactory for HttpBackends {
    fn backend(&self, request: &StartRequest) -> Result<Box<dyn AgentBackend>, String> {
        if request.script.is_some() {
            return Err("this service runs live agents; scripts are not accepted".into());
        }
        HttpBackend::new(self.0.clone())
            .map(|b| Box::new(b) as Box<dyn AgentBackend>)
            .map_err(|e| e.to_string())
    }
}

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub backends: Arc<dyn BackendFactory>,
    pub defaults: WorkflowConfig,
    pub metrics_seed: u64,
    pub stream_poll: Duration,
}

impl AppState {
    pub fn new(engine: Arc<Engine>, backends: Arc<dyn BackendFactory>) -> Self {
        Self {
            engine,
            backends,
            defaults: WorkflowConfig::default(),
            metrics_seed: 0,
            stream_poll: Duration::from_millis(100),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<WorkflowError> for ApiError {
    fn from(e: WorkflowError) -> Self {
        let status = match &e {
            WorkflowError::UnknownProject(_) | WorkflowError::UnknownTicket(_) => StatusCode::NOT_FOUND,
            WorkflowError::AlreadyTerminal { .. }
            | WorkflowError::TicketAlreadyAnswered(_)
            | WorkflowError::AlreadyRunning(_) => StatusCode::CONFLICT,
            WorkflowError::EmptyRemit | WorkflowError::UnknownDocument(_) | WorkflowError::InvalidConfig(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<CatalogueError> for ApiError {
    fn from(e: CatalogueError) -> Self {
        let status = match &e {
            CatalogueError::UnknownDocument(_) => StatusCode::NOT_FOUND,
            CatalogueError::NotPermitted { .. } => StatusCode::FORBIDDEN,
            CatalogueError::EmptyDocument | CatalogueError::InvalidMetadata(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

/// JSON body extractor that reports malformed bodies as 400.
pub struct Body<T>(pub T);

impl<S, T> FromRequest<S> for Body<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match axum::Json::<T>::from_request(req, state).await {
            Ok(axum::Json(v)) => Ok(Body(v)),
            Err(e @ JsonRejection::JsonDataError(_)) | Err(e @ JsonRejection::JsonSyntaxError(_)) => {
                Err(ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))
            }
            Err(e) => Err(ApiError::new(e.status(), e.body_text())),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn project_id(raw: &str) -> ApiResult<ProjectId> {
    raw.parse().map_err(|_| ApiError::not_found(format_args!("project {raw}")))
}

fn document_id(raw: &str) -> ApiResult<DocumentId> {
    raw.parse().map_err(|_| ApiError::not_found(format_args!("document {raw}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartRequest {
    pub remit: String,
    #[serde(default)]
    pub sources: Vec<DocumentId>,
    #[serde(default)]
    pub config: Option<WorkflowConfig>,
    /// Inline scenario for scripted services.
    #[serde(default)]
    pub script: Option<ScenarioScript>,
}

#[derive(Debug, Deserialize)]
pub struct AbortRequest {
    #[serde(default)]
    pub reason: String,
}

#[derive(Debug, Deserialize)]
pub struct AnswerRequest {
    pub answer: String,
}

#[derive(Debug, Deserialize)]
pub struct IngestRequest {
    pub title: String,
    pub content: String,
    #[serde(default = "candidate")]
    pub visibility: VisibilityLevel,
    #[serde(default)]
    pub metadata: NewMetadata,
}

fn candidate() -> VisibilityLevel {
    VisibilityLevel::Candidate
}

#[derive(Debug, Deserialize)]
pub struct PromoteRequest {
    pub to: VisibilityLevel,
}

#[derive(Debug, Deserialize)]
pub struct TicketQuery {
    pub state: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct DocumentQuery {
    pub visibility: Option<VisibilityLevel>,
    pub project: Option<ProjectId>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/projects", post(start_project).get(list_projects))
        .route("/projects/{id}", get(project_status))
        .route("/projects/{id}/events", get(project_events))
        .route("/projects/{id}/stream", get(project_stream))
        .route("/projects/{id}/abort", post(abort_project))
        .route("/clarifications", get(list_tickets))
        .route("/clarifications/{id}/answer", post(answer_ticket))
        .route("/documents", post(ingest).get(list_documents))
        .route("/documents/{id}", get(get_document))
        .route("/documents/{id}/promote", post(promote))
        .route("/metrics", get(metrics))
        .with_state(state)
}

async fn start_project(State(s): State<AppState>, Body(req): Body<StartRequest>) -> ApiResult<impl IntoResponse> {
    let backend = s
        .backends
        .backend(&req)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e))?;
    let config = req.config.unwrap_or(s.defaults);
    let id = s.engine.start_project(&req.remit, &req.sources, config, backend)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "project_id": id }))))
}

async fn list_projects(State(s): State<AppState>) -> impl IntoResponse {
    Json(s.engine.projects())
}

async fn project_status(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.engine.status(&project_id(&id)?)?))
}

async fn project_events(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.engine.project_events(&project_id(&id)?)?))
}

/// Server-sent events: each frame is one event-log record, as its JSON line.
/// The stream ends once the project is terminal and fully sent.
async fn project_stream(
    State(s): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let id = project_id(&id)?;
    s.engine.status(&id)?;
    let engine = s.engine.clone();
    let poll = s.stream_poll;
    let init = (0u64, VecDeque::new(), false);
    let stream = futures::stream::unfold(init, move |(mut after, mut pending, mut finished)| {
        let engine = engine.clone();
        let id = id.clone();
        async move {
            loop {
                if let Some(record) = pending.pop_front() {
                    let event = Event::default().data(compositor::events::EventRecord::to_json_line(&record));
                    return Some((Ok(event), (after, pending, finished)));
                }
                if finished {
                    return None;
                }
                // Read the status first so no record appended before the
                // terminal transition can be missed.
                let terminal = engine.status(&id).map(|t| t.status.is_terminal()).unwrap_or(true);
                let batch = engine.catalogue().events().since(after);
                if let Some(last) = batch.last() {
                    after = last.seq;
                }
                pending.extend(batch.into_iter().filter(|r| r.project() == Some(id.as_str())));
                finished = terminal;
                if pending.is_empty() && !finished {
                    tokio::time::sleep(poll).await;
                }
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn abort_project(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> ApiResult<impl IntoResponse> {
    // The body is optional; an empty one means no reason given.
    let reason = if body.iter().all(u8::is_ascii_whitespace) {
        String::new()
    } else {
        serde_json::from_slice::<AbortRequest>(&body)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?
            .reason
    };
    let reason = if reason.trim().is_empty() { "aborted by user".to_string() } else { reason };
    Ok(Json(s.engine.abort_project(&project_id(&id)?, &reason)?))
}

async fn list_tickets(State(s): State<AppState>, Query(q): Query<TicketQuery>) -> ApiResult<impl IntoResponse> {
    let open_only = match q.state.as_deref() {
        None | Some("all") => false,
        Some("open") => true,
        Some(other) => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("state must be open or all, not {other}"),
            ))
        }
    };
    Ok(Json(s.engine.tickets(open_only)))
}

async fn answer_ticket(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Body(req): Body<AnswerRequest>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.engine.answer_ticket(&id, &req.answer)?))
}

async fn ingest(State(s): State<AppState>, Body(req): Body<IngestRequest>) -> ApiResult<impl IntoResponse> {
    let id = s
        .engine
        .catalogue()
        .create_document(&req.title, &req.content, req.metadata, req.visibility, Actor::User)?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

async fn list_documents(State(s): State<AppState>, Query(q): Query<DocumentQuery>) -> impl IntoResponse {
    let catalogue = s.engine.catalogue();
    let docs = match q.visibility {
        Some(v) => catalogue.list_for(v, q.project.as_ref()),
        None => catalogue.all(),
    };
    Json(docs)
}

async fn get_document(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.engine.catalogue().get(&document_id(&id)?)?))
}

async fn promote(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Body(req): Body<PromoteRequest>,
) -> ApiResult<impl IntoResponse> {
    let doc = s.engine.catalogue().promote(&document_id(&id)?, req.to, Actor::User)?;
    Ok(Json(doc))
}

async fn metrics(State(s): State<AppState>) -> impl IntoResponse {
    let events = s.engine.catalogue().events().records();
    Json(MetricsReport::from_events(&events, s.metrics_seed))
}
