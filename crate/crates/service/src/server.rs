//! HTTP service over a shared, read-only model.

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::{Body, Bytes};
use axum::extract::{Query, State};
use axum::http::header::{CONTENT_LENGTH, CONTENT_TYPE};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use http_body_util::{BodyExt, LengthLimitError, Limited};
use serde::Serialize;
use tokio::sync::{OwnedSemaphorePermit, Semaphore};

use crate::error::{Result, ServiceError};
use crate::inference::{detect_frames, detect_image, frames_from_tar, frames_response, gradcam_image, DetectParams, Frame, GradcamParams};
use crate::model::Model;
use crate::response::*;

pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 16 * 1024 * 1024;
pub const DEFAULT_MAX_CONCURRENT: usize = 4;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub max_upload_bytes: usize,
    /// Requests running inference at once; further requests wait.
    pub max_concurrent: usize,
    /// Directory of static client assets served at `/`.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            max_upload_bytes: DEFAULT_MAX_UPLOAD_BYTES,
            max_concurrent: DEFAULT_MAX_CONCURRENT,
            static_dir: None,
        }
    }
}

struct Inner {
    model: RwLock<Option<Arc<Model>>>,
    permits: Arc<Semaphore>,
    config: ServerConfig,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// A service with no model yet; detection endpoints answer 503 until
    /// [`AppState::set_model`].
    pub fn new(config: ServerConfig) -> Self {
        Self {
            inner: Arc::new(Inner {
                model: RwLock::new(None),
                permits: Arc::new(Semaphore::new(config.max_concurrent.max(1))),
                config,
            }),
        }
    }

    pub fn with_model(config: ServerConfig, model: Model) -> Self {
        let s = Self::new(config);
        s.set_model(model);
        s
    }

    pub fn set_model(&self, model: Model) {
        *self.inner.model.write().expect("model lock") = Some(Arc::new(model));
    }

    pub fn model(&self) -> Option<Arc<Model>> {
        self.inner.model.read().expect("model lock").clone()
    }

    pub fn config(&self) -> &ServerConfig {
        &self.inner.config
    }

    fn ready(&self) -> Result<Arc<Model>> {
        self.model().ok_or(ServiceError::NotReady)
    }

    async fn permit(&self) -> OwnedSemaphorePermit {
        self.inner.permits.clone().acquire_owned().await.expect("semaphore never closed")
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(ErrorResponse::from(&self))).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    let mut r = Router::new()
        .route("/healthz", get(health))
        .route("/classes", get(classes))
        .route("/detect", post(detect))
        .route("/detect-frames", post(detect_frames_handler))
        .route("/gradcam", post(gradcam));
    if let Some(dir) = &state.config().static_dir {
        r = r.fallback_service(tower_http::services::ServeDir::new(dir));
    }
    r.with_state(state)
}

/// Serves until the listener fails or `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

async fn health(State(state): State<AppState>) -> Response {
    let model = state.model();
    let body = HealthResponse {
        schema_version: SCHEMA_VERSION,
        status: if model.is_some() { "ready" } else { "loading" }.to_string(),
        model_id: model.map(|m| m.model_id().to_string()),
    };
    let status = if body.model_id.is_some() { StatusCode::OK } else { StatusCode::SERVICE_UNAVAILABLE };
    (status, Json(body)).into_response()
}

async fn classes(State(state): State<AppState>) -> Result<Json<ClassesResponse>> {
    let model = state.ready()?;
    Ok(Json(ClassesResponse {
        schema_version: SCHEMA_VERSION,
        classes: model
            .classes()
            .iter()
            .enumerate()
            .map(|(id, name)| ClassEntry { id, name: name.clone() })
            .collect(),
    }))
}

type Params = HashMap<String, String>;

fn param<T: std::str::FromStr>(q: &Params, key: &str) -> Result<Option<T>> {
    q.get(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|_| ServiceError::BadRequest(format!("query parameter {key}={v:?} is not valid")))
        })
        .transpose()
}

fn detect_params(q: &Params) -> Result<DetectParams> {
    let d = DetectParams::default();
    let p = DetectParams {
        conf: param(q, "conf")?.unwrap_or(d.conf),
        nms_iou: param(q, "nms")?.unwrap_or(d.nms_iou),
    };
    p.validate()?;
    Ok(p)
}

async fn read_body(state: &AppState, headers: &HeaderMap, body: Body) -> Result<Bytes> {
    let limit = state.config().max_upload_bytes;
    let declared = headers
        .get(CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok());
    if declared.is_some_and(|n| n > limit) {
        return Err(ServiceError::PayloadTooLarge { limit });
    }
    match Limited::new(body, limit).collect().await {
        Ok(c) => Ok(c.to_bytes()),
        Err(e) if e.downcast_ref::<LengthLimitError>().is_some() => Err(ServiceError::PayloadTooLarge { limit }),
        Err(e) => Err(ServiceError::BadRequest(format!("could not read request body: {e}"))),
    }
}

struct Part {
    field: Option<String>,
    file_name: Option<String>,
    bytes: Vec<u8>,
}

fn content_type(headers: &HeaderMap) -> String {
    headers
        .get(CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase()
}

async fn multipart_parts(ct: &str, body: Bytes) -> Result<Vec<Part>> {
    let bad = |e: multer::Error| ServiceError::BadRequest(format!("malformed multipart body: {e}"));
    let boundary = multer::parse_boundary(ct).map_err(bad)?;
    let stream = futures::stream::once(async move { Ok::<Bytes, Infallible>(body) });
    let mut mp = multer::Multipart::new(stream, boundary);
    let mut parts = Vec::new();
    while let Some(field) = mp.next_field().await.map_err(bad)? {
        let name = field.name().map(str::to_string);
        let file_name = field.file_name().map(str::to_string);
        let bytes = field.bytes().await.map_err(bad)?.to_vec();
        parts.push(Part {
            field: name,
            file_name,
            bytes,
        });
    }
    Ok(parts)
}

/// The image of a single-image request: the raw body, or the multipart
/// part named `image` (else the first file part).
async fn single_image(headers: &HeaderMap, body: Bytes) -> Result<Vec<u8>> {
    let ct = content_type(headers);
    if !ct.starts_with("multipart/") {
        if body.is_empty() {
            return Err(ServiceError::BadRequest("empty upload".into()));
        }
        return Ok(body.to_vec());
    }
    let mut parts = multipart_parts(&ct, body).await?;
    let pos = parts
        .iter()
        .position(|p| p.field.as_deref() == Some("image"))
        .or_else(|| parts.iter().position(|p| p.file_name.is_some()))
        .ok_or_else(|| ServiceError::BadRequest("multipart upload has no image part".into()))?;
    Ok(parts.swap_remove(pos).bytes)
}

async fn frames_from_request(headers: &HeaderMap, body: Bytes) -> Result<Vec<Frame>> {
    let ct = content_type(headers);
    if ct.starts_with("multipart/") {
        let parts = multipart_parts(&ct, body).await?;
        let any_files = parts.iter().any(|p| p.file_name.is_some());
        Ok(parts
            .into_iter()
            .filter(|p| !any_files || p.file_name.is_some())
            .enumerate()
            .map(|(i, p)| Frame {
                name: p.file_name.or(p.field).unwrap_or_else(|| format!("frame{i}")),
                bytes: p.bytes,
            })
            .collect())
    } else if ct.is_empty() || ct.starts_with("application/x-tar") || ct.starts_with("application/octet-stream") {
        if body.is_empty() {
            return Ok(Vec::new());
        }
        frames_from_tar(&body)
    } else {
        Err(ServiceError::BadRequest(format!(
            "unsupported content type {ct:?}; send multipart/form-data or application/x-tar"
        )))
    }
}

async fn blocking<T: Send + 'static>(
    state: &AppState,
    f: impl FnOnce() -> Result<T> + Send + 'static,
) -> Result<T> {
    let permit = state.permit().await;
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        f()
    })
    .await
    .map_err(|e| ServiceError::Internal(format!("inference task failed: {e}")))?
}

fn json<T: Serialize>(v: &T) -> Response {
    Json(v).into_response()
}

async fn detect(State(state): State<AppState>, Query(q): Query<Params>, headers: HeaderMap, body: Body) -> Result<Response> {
    let model = state.ready()?;
    let params = detect_params(&q)?;
    let bytes = read_body(&state, &headers, body).await?;
    let image = single_image(&headers, bytes).await?;
    let r = blocking(&state, move || detect_image(&model, &image, &params)).await?;
    Ok(json(&r))
}

async fn detect_frames_handler(
    State(state): State<AppState>,
    Query(q): Query<Params>,
    headers: HeaderMap,
    body: Body,
) -> Result<Response> {
    let model = state.ready()?;
    let params = detect_params(&q)?;
    let ndjson = match q.get("format").map(String::as_str) {
        None | Some("json") => false,
        Some("ndjson") => true,
        Some(other) => return Err(ServiceError::BadRequest(format!("unknown format {other:?}; use json or ndjson"))),
    };
    let bytes = read_body(&state, &headers, body).await?;
    let frames = frames_from_request(&headers, bytes).await?;
    if !ndjson {
        let r = blocking(&state, move || frames_response(&model, frames, params)).await?;
        return Ok(json(&r));
    }
    // One JSON record per line, emitted as each frame finishes.
    let permit = state.permit().await;
    let (tx, rx) = tokio::sync::mpsc::channel::<Bytes>(4);
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        for rec in detect_frames(&model, frames, params) {
            let mut line = serde_json::to_vec(&rec).expect("serialisable record");
            line.push(b'\n');
            if tx.blocking_send(Bytes::from(line)).is_err() {
                break;
            }
        }
    });
    let stream = futures::stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|b| (Ok::<_, Infallible>(b), rx)) });
    Ok(Response::builder()
        .header(CONTENT_TYPE, "application/x-ndjson")
        .body(Body::from_stream(stream))
        .expect("valid response"))
}

async fn gradcam(State(state): State<AppState>, Query(q): Query<Params>, headers: HeaderMap, body: Body) -> Result<Response> {
    let model = state.ready()?;
    let d = GradcamParams::default();
    let params = GradcamParams {
        detect: detect_params(&q)?,
        detection: param(&q, "detection")?,
        layer: q.get("layer").cloned(),
        alpha: param(&q, "alpha")?.unwrap_or(d.alpha),
    };
    let bytes = read_body(&state, &headers, body).await?;
    let image = single_image(&headers, bytes).await?;
    let r = blocking(&state, move || gradcam_image(&model, &image, &params).map(|o| o.response)).await?;
    Ok(json(&r))
}
