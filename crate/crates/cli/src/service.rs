//! HTTP inference service.

use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::api::{parse_query_list, ModelContext, QueryCategory, RequestError, SegmentRequest};
use crate::imaging::decode_png;

/// Environment variable holding the default port.
pub const PORT_ENV: &str = "MASKGROUND_PORT";
pub const DEFAULT_PORT: u16 = 8080;
/// Default cap on request bodies.
pub const DEFAULT_MAX_BODY_BYTES: usize = 8 * 1024 * 1024;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_id: String,
}

impl IntoResponse for RequestError {
    fn into_response(self) -> Response {
        if let RequestError::Internal(m) = &self {
            log::error!("internal error: {m}");
        }
        let status = StatusCode::from_u16(self.status()).expect("valid status");
        (status, Json(self.body())).into_response()
    }
}

/// Builds the router over a loaded model.
pub fn router(ctx: Arc<ModelContext>, max_body_bytes: usize) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/segment", axum::routing::post(segment))
        .route("/v1/proposals", get(proposals_get).post(proposals_post))
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .with_state(ctx)
}

async fn health(State(ctx): State<Arc<ModelContext>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_id: ctx.model_id.clone(),
    })
}

/// Deserializes a JSON body, reporting the path of the first bad field.
fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, RequestError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let message = e.into_inner().to_string();
        RequestError::bad(field_path(&path, &message), message)
    })
}

/// Extends the parent path with the field named by a missing-field error;
/// unknown fields already appear in the path.
fn field_path(path: &str, message: &str) -> String {
    let named = message
        .strip_prefix("missing field `")
        .and_then(|rest| rest.split('`').next());
    match (path, named) {
        (".", Some(name)) => name.to_string(),
        (".", None) => "body".to_string(),
        (p, Some(name)) => format!("{p}.{name}"),
        (p, None) => p.to_string(),
    }
}

/// Decodes base64 (standard or URL-safe, padding optional) PNG data.
pub fn decode_image_field(data: &str, field: &str) -> Result<ndarray::Array3<f32>, RequestError> {
    use base64::engine::general_purpose::{STANDARD, STANDARD_NO_PAD, URL_SAFE, URL_SAFE_NO_PAD};
    let cleaned: String = data
        .trim()
        .trim_start_matches("data:image/png;base64,")
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect();
    let bytes = [STANDARD, STANDARD_NO_PAD, URL_SAFE, URL_SAFE_NO_PAD]
        .iter()
        .find_map(|e| e.decode(&cleaned).ok())
        .ok_or_else(|| RequestError::bad(field, "image is not valid base64"))?;
    decode_png(&bytes).map_err(|e| RequestError::bad(field, format!("image is not a readable PNG: {e}")))
}

async fn run_blocking<T, F>(f: F) -> Result<T, RequestError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, RequestError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| RequestError::Internal(format!("worker failed: {e}")))?
}

async fn segment(State(ctx): State<Arc<ModelContext>>, body: Bytes) -> Result<Response, RequestError> {
    let req: SegmentRequest = parse_body(&body)?;
    let started = Instant::now();
    let image = decode_image_field(&req.image, "image")?;
    let mut resp = run_blocking(move || ctx.segment(&image, &req.queries, &req.options).map(|(r, _)| r)).await?;
    resp.timing_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(Json(resp).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposalsQuery {
    image: String,
    /// Same syntax as the CLI `--queries` flag.
    #[serde(default)]
    queries: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposalsBody {
    image: String,
    #[serde(default)]
    queries: Vec<QueryCategory>,
}

async fn proposals_get(
    State(ctx): State<Arc<ModelContext>>,
    query: Result<Query<ProposalsQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Response, RequestError> {
    let Query(q) = query.map_err(|e| RequestError::bad("query", e.body_text()))?;
    let queries = q.queries.as_deref().map(parse_query_list).unwrap_or_default();
    proposals(ctx, &q.image, queries).await
}

async fn proposals_post(State(ctx): State<Arc<ModelContext>>, body: Bytes) -> Result<Response, RequestError> {
    let b: ProposalsBody = parse_body(&body)?;
    proposals(ctx, &b.image, b.queries).await
}

async fn proposals(ctx: Arc<ModelContext>, image: &str, queries: Vec<QueryCategory>) -> Result<Response, RequestError> {
    let started = Instant::now();
    let image = decode_image_field(image, "image")?;
    let mut resp = run_blocking(move || ctx.proposals(&image, &queries)).await?;
    resp.timing_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(Json(resp).into_response())
}

/// Serves until interrupted.
pub async fn serve(ctx: Arc<ModelContext>, port: u16, max_body_bytes: usize) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    println!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(ctx, max_body_bytes))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_paths() {
        assert_eq!(field_path(".", "missing field `queries` at line 1"), "queries");
        assert_eq!(field_path("options", "missing field `x`"), "options.x");
        assert_eq!(field_path("extra", "unknown field `extra`, expected one of"), "extra");
        assert_eq!(field_path("queries[0].phrases", "invalid type"), "queries[0].phrases");
        assert_eq!(field_path(".", "EOF while parsing"), "body");
    }
}
