use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use crate::app::{AppError, AppState};
use crate::ServerConfig;

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        let status = match self {
            AppError::NotReady => StatusCode::SERVICE_UNAVAILABLE,
            AppError::SessionNotFound(_) => StatusCode::NOT_FOUND,
            AppError::SessionTerminal(..) => StatusCode::CONFLICT,
            AppError::ImageDecode(_) => StatusCode::UNPROCESSABLE_ENTITY,
            AppError::BadRequest(_) => StatusCode::BAD_REQUEST,
            AppError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.code(), "message": self.message() }))).into_response()
    }
}

type Shared = State<Arc<AppState>>;

async fn healthz(State(app): Shared) -> Result<Response, AppError> {
    let version = app.model_version().ok_or(AppError::NotReady)?;
    Ok(Json(json!({ "status": "ok", "model_version": version })).into_response())
}

async fn create_session(State(app): Shared) -> Result<Response, AppError> {
    let id = app.create_session()?;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))).into_response())
}

async fn get_session(State(app): Shared, Path(id): Path<String>) -> Result<Response, AppError> {
    Ok(Json(app.get(&id)?).into_response())
}

async fn submit_attempt(State(app): Shared, Path(id): Path<String>, multipart: Result<Multipart, axum::extract::multipart::MultipartRejection>) -> Result<Response, AppError> {
    // Unknown session wins over a malformed body.
    app.get(&id)?;
    let mut multipart = multipart.map_err(|e| AppError::BadRequest(e.body_text()))?;
    let mut image = None;
    while let Some(field) = multipart.next_field().await.map_err(|e| AppError::BadRequest(e.body_text()))? {
        if field.name() == Some("image") {
            image = Some(field.bytes().await.map_err(|e| AppError::BadRequest(e.body_text()))?);
            break;
        }
    }
    let bytes = image.ok_or_else(|| AppError::BadRequest("multipart field \"image\" is required".into()))?;
    Ok(Json(app.submit(&id, bytes.to_vec()).await?).into_response())
}

pub fn router(app: Arc<AppState>, cfg: &ServerConfig) -> Router {
    let api = Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/attempts", post(submit_attempt))
        .layer(DefaultBodyLimit::max(cfg.max_upload_bytes))
        .layer(CorsLayer::permissive())
        .with_state(app);
    match &cfg.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}
