use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use qurag_core::mqm::Quality;
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::oneshot;

use crate::store::{ErrorTag, Store, StoreError};

pub const ANNOTATOR_HEADER: &str = "x-annotator-id";

impl IntoResponse for StoreError {
    fn into_response(self) -> Response {
        let msg = self.to_string();
        match self {
            StoreError::UnknownRun(_) | StoreError::UnknownItem(_) => {
                (StatusCode::NOT_FOUND, Json(json!({ "error": msg }))).into_response()
            }
            StoreError::Conflict { current, .. } => (
                StatusCode::CONFLICT,
                Json(json!({ "error": msg, "current_version": current })),
            )
                .into_response(),
            StoreError::Invalid(v) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                Json(json!({ "error": msg, "violations": v.iter().map(|x| &x.0).collect::<Vec<_>>() })),
            )
                .into_response(),
            StoreError::Agreement(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({ "error": msg }))).into_response()
            }
            StoreError::BadRequest(_) => (StatusCode::BAD_REQUEST, Json(json!({ "error": msg }))).into_response(),
            StoreError::Load { .. } | StoreError::Log { .. } => {
                log::error!("{msg}");
                (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": msg }))).into_response()
            }
        }
    }
}

type Shared = State<Arc<Store>>;

#[derive(Debug, Deserialize)]
struct ErrorsBody {
    version: u64,
    errors: Vec<ErrorTag>,
}

#[derive(Debug, Deserialize)]
struct QualityBody {
    version: u64,
    quality: Quality,
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    run: String,
    model: Option<String>,
    annotator: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RunQuery {
    run: String,
}

fn annotator(headers: &HeaderMap) -> Result<String, StoreError> {
    headers
        .get(ANNOTATOR_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(str::to_owned)
        .ok_or_else(|| StoreError::BadRequest(format!("missing {ANNOTATOR_HEADER} header")))
}

fn csv(body: String) -> Response {
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], body).into_response()
}

async fn list_runs(State(store): Shared) -> Response {
    Json(store.runs()).into_response()
}

async fn list_items(State(store): Shared, Path(run): Path<String>) -> Result<Response, StoreError> {
    Ok(Json(store.items(&run)?).into_response())
}

async fn get_item(State(store): Shared, Path(reference): Path<String>) -> Result<Response, StoreError> {
    Ok(Json(store.item(&reference)?).into_response())
}

async fn post_errors(
    State(store): Shared,
    Path(reference): Path<String>,
    headers: HeaderMap,
    Json(body): Json<ErrorsBody>,
) -> Result<Response, StoreError> {
    let who = annotator(&headers)?;
    let version =
        tokio::task::spawn_blocking(move || store.submit(&reference, &who, body.version, Some(body.errors), None))
            .await
            .expect("submit task panicked")?;
    Ok(Json(json!({ "version": version })).into_response())
}

async fn post_quality(
    State(store): Shared,
    Path(reference): Path<String>,
    headers: HeaderMap,
    Json(body): Json<QualityBody>,
) -> Result<Response, StoreError> {
    let who = annotator(&headers)?;
    let version =
        tokio::task::spawn_blocking(move || store.submit(&reference, &who, body.version, None, Some(body.quality)))
            .await
            .expect("submit task panicked")?;
    Ok(Json(json!({ "version": version })).into_response())
}

async fn agreement(State(store): Shared, Query(q): Query<RunQuery>) -> Result<Response, StoreError> {
    Ok(Json(store.agreement(&q.run)?).into_response())
}

async fn export_quality(State(store): Shared, Query(q): Query<ExportQuery>) -> Result<Response, StoreError> {
    let table = match &q.annotator {
        Some(a) => store.quality_table_for(&q.run, q.model.as_deref(), a)?,
        None => store.quality_table(&q.run, q.model.as_deref())?,
    };
    Ok(csv(table.to_csv()))
}

async fn export_errors(State(store): Shared, Query(q): Query<ExportQuery>) -> Result<Response, StoreError> {
    Ok(csv(store.error_table(&q.run, q.model.as_deref())?.to_csv()))
}

async fn not_found() -> Response {
    (StatusCode::NOT_FOUND, Json(json!({ "error": "no such endpoint" }))).into_response()
}

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{id}/items", get(list_items))
        .route("/items/{reference}", get(get_item))
        .route("/items/{reference}/annotations", post(post_errors))
        .route("/items/{reference}/quality", post(post_quality))
        .route("/agreement", get(agreement))
        .route("/export/quality", get(export_quality))
        .route("/export/errors", get(export_errors))
        .fallback(not_found)
        .with_state(store)
}

/// A server running on its own runtime thread.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) -> std::io::Result<()> {
        self.stop_and_join()
    }

    /// Blocks until the server exits.
    pub fn wait(mut self) -> std::io::Result<()> {
        self.stop.take();
        match self.thread.take() {
            Some(t) => t.join().expect("server thread panicked"),
            None => Ok(()),
        }
    }

    fn stop_and_join(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().expect("server thread panicked"),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}

/// Binds `addr` and serves in the background. Port 0 picks a free port.
pub fn serve(store: Arc<Store>, addr: SocketAddr) -> std::io::Result<ServerHandle> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let listener = runtime.block_on(TcpListener::bind(addr))?;
    let bound = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(store);
    let thread = std::thread::spawn(move || {
        runtime.block_on(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async move {
                    // a dropped sender (from `wait`) means run until killed
                    if rx.await.is_err() {
                        std::future::pending::<()>().await;
                    }
                })
                .await
        })
    });
    log::info!("annotation service listening on http://{bound}");
    Ok(ServerHandle {
        addr: bound,
        stop: Some(tx),
        thread: Some(thread),
    })
}
