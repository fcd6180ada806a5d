//! HTTP front of [`RatingService`].
//!
//! | method | path                               | body / reply                 |
//! |--------|------------------------------------|------------------------------|
//! | POST   | `/sessions`                        | `CreateSession` → `SessionView` |
//! | GET    | `/sessions/{id}/next`              | `NextPayload`                |
//! | POST   | `/ratings`                         | `SubmitRating` → `{"status"}` |
//! | GET    | `/report`                          | `RatingReport`               |
//! | GET    | `/media/{session}/{item}/{which}`  | image bytes                  |

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

use super::service::{CreateSession, RatingService, SubmitRating};
use crate::error::{Error, IoContext, Result};

struct ApiError(Error);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::InvalidArgument(_) | Error::Config(_) => StatusCode::BAD_REQUEST,
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

type Svc = Arc<RatingService>;

async fn blocking<T: Send + 'static>(svc: Svc, f: impl FnOnce(&RatingService) -> Result<T> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError(Error::Stage {
            stage: "rating".into(),
            message: e.to_string(),
        }))?
        .map_err(ApiError)
}

async fn create_session(State(svc): State<Svc>, Json(req): Json<CreateSession>) -> Result<Response, ApiError> {
    let view = blocking(svc, move |s| s.create_session(&req)).await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn next_item(State(svc): State<Svc>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let p = blocking(svc, move |s| s.next_item(&id)).await?;
    Ok(Json(p).into_response())
}

async fn submit(State(svc): State<Svc>, Json(req): Json<SubmitRating>) -> Result<Response, ApiError> {
    let ack = blocking(svc, move |s| s.submit_rating(&req)).await?;
    Ok(Json(json!({ "status": ack })).into_response())
}

async fn report(State(svc): State<Svc>) -> Result<Response, ApiError> {
    let r = blocking(svc, |s| s.report()).await?;
    Ok(Json(r).into_response())
}

async fn media(State(svc): State<Svc>, Path((session, item, which)): Path<(String, String, String)>) -> Result<Response, ApiError> {
    let bytes = blocking(svc, move |s| {
        let p = s.media_path(&session, &item, &which)?;
        std::fs::read(&p).at(&p)
    })
    .await?;
    let kind = match bytes.get(..4) {
        Some([0x89, b'P', b'N', b'G']) => "image/png",
        Some([0xff, 0xd8, ..]) => "image/jpeg",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, kind), (header::CACHE_CONTROL, "no-store")], bytes).into_response())
}

pub fn router(svc: Svc) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_item))
        .route("/ratings", post(submit))
        .route("/report", get(report))
        .route("/media/{session}/{item}/{which}", get(media))
        .with_state(svc)
}

/// Serves until `shutdown` resolves.
pub async fn serve(svc: Svc, listener: tokio::net::TcpListener, shutdown: impl std::future::Future<Output = ()> + Send + 'static) -> Result<()> {
    let addr = listener.local_addr().map_err(|e| Error::io("listener", e))?;
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| Error::io(addr.to_string(), e))
}

/// A server on its own runtime thread; stops when dropped.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<Result<()>>>,
}

impl BackgroundServer {
    pub fn start(svc: Svc, addr: SocketAddr) -> Result<Self> {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .map_err(|e| Error::io("tokio runtime", e))?;
        let listener = rt
            .block_on(tokio::net::TcpListener::bind(addr))
            .map_err(|e| Error::io(addr.to_string(), e))?;
        let addr = listener.local_addr().map_err(|e| Error::io("listener", e))?;
        let (tx, rx) = tokio::sync::oneshot::channel();
        let thread = std::thread::spawn(move || {
            rt.block_on(serve(svc, listener, async {
                let _ = rx.await;
            }))
        });
        Ok(Self {
            addr,
            stop: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    pub fn stop(mut self) -> Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take().map(|t| t.join()) {
            Some(Ok(r)) => r,
            Some(Err(_)) => Err(Error::Stage {
                stage: "rating".into(),
                message: "server thread panicked".into(),
            }),
            None => Ok(()),
        }
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}
