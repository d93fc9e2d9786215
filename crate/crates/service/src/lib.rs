//! HTTP service, command-line verbs and benchmarks over `acmix-core`.

pub mod api;
pub mod bench;
pub mod cli;
pub mod config;
pub mod metrics;

use std::sync::Arc;

use tokio::net::TcpListener;

pub use api::{router, AppState};
pub use config::ServiceConfig;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Core(#[from] acmix_core::Error),
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: std::net::SocketAddr,
        source: std::io::Error,
    },
    #[error("server failed: {0}")]
    Server(std::io::Error),
}

/// Open the persisted state and serve until interrupted.
pub async fn serve(config: ServiceConfig) -> Result<(), ServeError> {
    let pipeline = tokio::task::spawn_blocking({
        let config = config.clone();
        move || config.open_pipeline()
    })
    .await
    .expect("state loading panicked")?;
    let addr = config.listen;
    let state: Arc<AppState> = AppState::new(config, pipeline);
    let listener = TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServeError::Server)
}
