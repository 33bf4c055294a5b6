//! HTTP+JSON routes over a [`Service`].

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::error::AnnotateError;
use crate::event::SessionState;
use crate::service::{Service, SubmitRequest};
use crate::store::Session;

#[derive(Clone, Debug, Default)]
pub struct HttpOptions {
    /// Shared bearer token required on every route except `/healthz`.
    pub token: Option<String>,
    /// Directory served under `/media/`.
    pub media_root: Option<PathBuf>,
}

#[derive(Clone)]
struct AppState {
    service: Arc<Service>,
    token: Option<Arc<str>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl IntoResponse for AnnotateError {
    fn into_response(self) -> Response {
        let status = match &self {
            AnnotateError::Validation(_) | AnnotateError::EmptyManifest => StatusCode::UNPROCESSABLE_ENTITY,
            AnnotateError::UnknownSession(_) => StatusCode::NOT_FOUND,
            AnnotateError::SessionComplete(_) | AnnotateError::StaleItem { .. } | AnnotateError::DuplicateActiveSession { .. } => StatusCode::CONFLICT,
            AnnotateError::Unauthorized => StatusCode::UNAUTHORIZED,
            AnnotateError::Corrupt { .. } | AnnotateError::BadRecord { .. } | AnnotateError::Io { .. } => {
                log::error!("{self}");
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        let body = ErrorBody {
            code: self.code().to_owned(),
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub subject_id: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub subject_id: String,
    pub seed: u64,
    pub state: SessionState,
    pub position: usize,
    pub total: usize,
    pub queue: Vec<String>,
}

impl From<Session> for SessionView {
    fn from(s: Session) -> Self {
        SessionView {
            position: s.cursor,
            total: s.queue.len(),
            queue: s.queue.into_iter().map(|i| i.0).collect(),
            session_id: s.session_id,
            subject_id: s.subject_id,
            seed: s.seed,
            state: s.state,
        }
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, AnnotateError> {
    serde_json::from_slice(body).map_err(|e| AnnotateError::Validation(format!("request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, AnnotateError> + Send + 'static) -> Result<T, AnnotateError> {
    tokio::task::spawn_blocking(f).await.unwrap_or_else(|e| {
        Err(AnnotateError::Io {
            path: PathBuf::new(),
            source: std::io::Error::other(e.to_string()),
        })
    })
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> Result<impl IntoResponse, AnnotateError> {
    let req: CreateSession = parse_body(&body)?;
    let svc = app.service.clone();
    let s = blocking(move || svc.create_session(&req.subject_id, req.seed)).await?;
    Ok((StatusCode::CREATED, Json(SessionView::from(s))))
}

async fn current(State(app): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, AnnotateError> {
    Ok(Json(app.service.current(&id)?))
}

async fn advance(State(app): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, AnnotateError> {
    let svc = app.service.clone();
    Ok(Json(blocking(move || svc.advance(&id)).await?))
}

async fn retreat(State(app): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, AnnotateError> {
    let svc = app.service.clone();
    Ok(Json(blocking(move || svc.retreat(&id)).await?))
}

async fn submit(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<impl IntoResponse, AnnotateError> {
    let req: SubmitRequest = parse_body(&body)?;
    let svc = app.service.clone();
    Ok(Json(blocking(move || svc.submit(&id, &req)).await?))
}

async fn export(State(app): State<AppState>) -> impl IntoResponse {
    Json(app.service.export())
}

async fn healthz() -> impl IntoResponse {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn require_token(State(app): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == &**token);
        if !ok {
            return AnnotateError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

pub fn router(service: Arc<Service>, opts: HttpOptions) -> Router {
    let app = AppState {
        service,
        token: opts.token.map(Arc::from),
    };
    let mut guarded = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/current", get(current))
        .route("/sessions/{id}/advance", post(advance))
        .route("/sessions/{id}/retreat", post(retreat))
        .route("/sessions/{id}/submit", post(submit))
        .route("/export", get(export));
    if let Some(root) = opts.media_root {
        guarded = guarded.nest_service("/media", ServeDir::new(root));
    }
    let guarded = guarded.layer(middleware::from_fn_with_state(app.clone(), require_token));
    Router::new().route("/healthz", get(healthz)).merge(guarded).with_state(app)
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, service: Arc<Service>, opts: HttpOptions) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service, opts))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
