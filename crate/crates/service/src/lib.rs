//! HTTP screening service: predictions, Grad-CAM overlays and a persistent triage
//! queue backed by a single SQLite file.

pub mod api;
pub mod config;
pub mod models;
pub mod store;

use thiserror::Error;

pub use api::{router, AppState};
pub use config::ServiceConfig;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("store: {0}")]
    Store(#[from] rusqlite::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binds the configured address and serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    config.validate()?;
    let addr = format!("{}:{}", config.bind, config.port);
    let state = tokio::task::spawn_blocking(move || AppState::open(config))
        .await
        .map_err(|e| ServiceError::Config(e.to_string()))??;
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
