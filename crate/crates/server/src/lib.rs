//! HTTP service for guided photo capture: a session takes up to
//! `attempt_cap` photos, each is assessed, and the session ends on the first
//! acceptable one or falls back to the best attempt.

mod app;
mod config;
mod http;
mod store;

use std::sync::Arc;

use thiserror::Error;

pub use app::{AppError, AppState, Assessor, Clock, LoadedModel};
pub use config::ServerConfig;
pub use http::router;
pub use store::ImageStore;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("event log: {0}")]
    Log(String),
    #[error("model: {0}")]
    Model(String),
}

/// Serve until ctrl-c.
pub async fn run(cfg: ServerConfig) -> Result<(), ServerError> {
    let state = Arc::new(AppState::open(&cfg)?);
    if state.model_version().is_none() {
        eprintln!("warning: no model loaded; requests will get 503 until one is configured");
    }
    let app = router(state, &cfg);
    let listener = tokio::net::TcpListener::bind((cfg.bind.as_str(), cfg.port)).await.map_err(|e| ServerError::Io(format!("bind {}:{}: {e}", cfg.bind, cfg.port)))?;
    let addr = listener.local_addr().map_err(|e| ServerError::Io(e.to_string()))?;
    eprintln!("listening on http://{addr}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServerError::Io(e.to_string()))
}
