//! JSON API over a shared, read-only [`QueryService`].

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tower_http::services::ServeDir;

use cbhir_core::service::{QueryRequest, QueryService, ServiceError};

type Shared = Arc<QueryService>;

struct ApiError(ServiceError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

/// Runs CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(ServiceError::Internal(e.to_string())))?
        .map_err(ApiError)
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn query(State(s): State<Shared>, Json(req): Json<QueryRequest>) -> Result<Response, ApiError> {
    let resp = blocking(move || s.handle_query(&req)).await?;
    Ok(Json(resp).into_response())
}

async fn patch(State(s): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(png(blocking(move || s.patch_png(&id)).await?))
}

async fn saliency(State(s): State<Shared>, Path((query_id, id)): Path<(String, String)>) -> Result<Response, ApiError> {
    Ok(png(s.saliency_png(&query_id, &id)?))
}

async fn stats(State(s): State<Shared>) -> Response {
    Json(s.stats()).into_response()
}

async fn report(State(s): State<Shared>) -> Result<Response, ApiError> {
    let r = s
        .report()
        .cloned()
        .ok_or_else(|| ServiceError::NotFound("no evaluation report was loaded".into()))?;
    Ok(Json(r).into_response())
}

/// Patch ids contain `/` (`class/stem`), hence the catch-all segments.
pub fn router(service: Shared, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/query", post(query))
        .route("/api/patches/{*id}", get(patch))
        .route("/api/saliency/{query}/{*id}", get(saliency))
        .route("/api/stats", get(stats))
        .route("/api/report", get(report))
        .with_state(service);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(service: QueryService, addr: SocketAddr, static_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(service), static_dir)).await?;
    Ok(())
}
