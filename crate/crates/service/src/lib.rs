//! HTTP API over the analysis pipeline.
//!
//! | Method | Path | Body / query |
//! |---|---|---|
//! | POST | `/v1/submissions` | [`api::SubmissionRequest`], optional `Idempotency-Key` header |
//! | POST | `/v1/sessions/{id}/messages` | [`api::MessageRequest`] |
//! | GET | `/v1/sessions/{id}` | |
//! | GET | `/v1/sessions/{id}/summary` | |
//! | GET | `/v1/pool/stats` | |
//! | GET | `/v1/metrics/report` | `?group=outcomes` or `?group=repeat` |
//! | POST | `/v1/events` | [`api::EventBatch`] |
//! | POST | `/v1/ablation/judgments` | [`api::JudgmentBatch`] |
//! | GET | `/v1/ablation/winrates` | |
//! | GET | `/healthz` | |
//!
//! Every `/v1` route requires `Authorization: Bearer <token>` where the
//! token comes from `VATE_API_TOKEN`.

pub mod api;
mod handlers;
mod state;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::DefaultBodyLimit;
use axum::routing::{get, post};
use axum::Router;

pub use state::{AppState, TOKEN_ENV};

/// Base64 inflates the 5 MB draft cap by a third; leave room for the rest
/// of the body.
const BODY_LIMIT: usize = api::MAX_DRAFT_BYTES / 3 * 4 + 64 * 1024;

pub fn router(state: Arc<AppState>) -> Router {
    let v1 = Router::new()
        .route("/submissions", post(handlers::submit))
        .route("/sessions/{id}", get(handlers::session))
        .route("/sessions/{id}/messages", post(handlers::message))
        .route("/sessions/{id}/summary", get(handlers::summary))
        .route("/pool/stats", get(handlers::pool_stats))
        .route("/metrics/report", get(handlers::report))
        .route("/events", post(handlers::post_events))
        .route("/ablation/judgments", post(handlers::post_judgments))
        .route("/ablation/winrates", get(handlers::winrates))
        .route_layer(axum::middleware::from_fn_with_state(Arc::clone(&state), handlers::require_token));
    Router::new()
        .nest("/v1", v1)
        .route("/healthz", get(|| async { "ok" }))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// A server on its own runtime thread, stopped on drop.
pub struct BackgroundServer {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl BackgroundServer {
    pub fn start(state: Arc<AppState>, addr: &str) -> std::io::Result<Self> {
        let std_listener = std::net::TcpListener::bind(addr)?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::Builder::new().name("vate-server".into()).spawn(move || {
            let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener)?;
                serve(listener, state, async {
                    let _ = rx.await;
                })
                .await
            })
        })?;
        Ok(Self { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(thread) = self.thread.take() {
            match thread.join() {
                Ok(Err(e)) => log::error!("server stopped with error: {e}"),
                Err(_) => log::error!("server thread panicked"),
                Ok(Ok(())) => {}
            }
        }
    }
}
