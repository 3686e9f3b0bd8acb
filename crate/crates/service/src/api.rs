//! HTTP/JSON API over frozen checkpoints.
//!
//! Images travel as base64 PNG (8-bit RGB), masks as base64 PNG (8-bit
//! grayscale, 255 = 1.0).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use lomit::checkpoint::{self, Checkpoint};
use lomit::imageio::{self, MaskRaster};
use lomit::networks::ModelBundle;
use lomit::LomitError;
use serde::{Deserialize, Serialize};

use crate::inference;

/// Lists the images resized to the checkpoint resolution, comma separated.
pub const RESIZED_HEADER: &str = "x-lomit-resized";

/// One loaded checkpoint. The model sits behind a mutex because torch
/// tensors are not `Sync`; it is only ever read.
pub struct LoadedCheckpoint {
    pub id: String,
    pub iteration: u64,
    pub resolution: u32,
    pub attribute_names: Vec<String>,
    model: Mutex<ModelBundle>,
}

impl LoadedCheckpoint {
    pub fn new(id: impl Into<String>, ckpt: Checkpoint) -> Self {
        Self {
            id: id.into(),
            iteration: ckpt.iteration,
            resolution: ckpt.architecture().resolution as u32,
            attribute_names: ckpt.attribute_names,
            model: Mutex::new(ckpt.model),
        }
    }
}

/// Identifier of a checkpoint file: its file stem.
pub fn checkpoint_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

#[derive(Default)]
pub struct AppState {
    checkpoints: BTreeMap<String, Arc<LoadedCheckpoint>>,
    default_id: Option<String>,
}

impl AppState {
    /// Loads every checkpoint; the first one is the default.
    pub fn load(paths: &[PathBuf]) -> lomit::Result<Self> {
        let mut state = Self::default();
        for path in paths {
            let id = checkpoint_id(path);
            if state.checkpoints.contains_key(&id) {
                return Err(LomitError::Config(format!("duplicate checkpoint id {id}")));
            }
            state.insert(LoadedCheckpoint::new(id, checkpoint::load_checkpoint(path)?));
        }
        Ok(state)
    }

    pub fn insert(&mut self, ckpt: LoadedCheckpoint) {
        self.default_id.get_or_insert_with(|| ckpt.id.clone());
        self.checkpoints.insert(ckpt.id.clone(), Arc::new(ckpt));
    }

    fn get(&self, id: &str) -> Result<Arc<LoadedCheckpoint>, ApiError> {
        self.checkpoints
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown checkpoint_id {id:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslateRequest {
    pub input_image: String,
    pub exemplar_image: String,
    #[serde(default)]
    pub input_mask_override: Option<String>,
    #[serde(default)]
    pub exemplar_mask_override: Option<String>,
    pub checkpoint_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslateResponse {
    pub output_image: String,
    pub input_mask: String,
    pub exemplar_mask: String,
    pub timing_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MasksRequest {
    pub input_image: String,
    pub exemplar_image: String,
    pub checkpoint_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MasksResponse {
    pub input_mask: String,
    pub exemplar_mask: String,
    pub timing_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub id: String,
    pub iteration: u64,
    pub resolution: u32,
    pub attributes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaResponse {
    pub version: String,
    pub default_checkpoint: Option<String>,
    /// Attributes and resolution of the default checkpoint.
    pub attributes: Vec<String>,
    pub resolution: Option<u32>,
    pub checkpoints: Vec<CheckpointInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<LomitError> for ApiError {
    fn from(e: LomitError) -> Self {
        let status = match e {
            LomitError::Image(_) => StatusCode::BAD_REQUEST,
            LomitError::Dimension(_) | LomitError::Domain(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}", self.message);
        }
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

fn decode_b64(field: &str, value: &str) -> Result<Vec<u8>, ApiError> {
    STANDARD
        .decode(value)
        .map_err(|e| ApiError::bad_request(format!("{field} is not valid base64: {e}")))
}

fn encode_b64(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

fn decode_override(field: &str, value: Option<&str>, resolution: u32) -> Result<Option<MaskRaster>, ApiError> {
    value
        .map(|v| {
            let bytes = decode_b64(field, v)?;
            imageio::decode_mask(&bytes, Some((resolution, resolution))).map_err(|e| match e {
                LomitError::Dimension(msg) => ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!("{field}: {msg} (masks are never resized)"),
                ),
                other => ApiError::bad_request(format!("{field}: {other}")),
            })
        })
        .transpose()
}

fn with_resize_header<T: IntoResponse>(body: T, resized: &[&str]) -> Response {
    let mut response = body.into_response();
    if !resized.is_empty() {
        if let Ok(v) = HeaderValue::from_str(&resized.join(",")) {
            response.headers_mut().insert(HeaderName::from_static(RESIZED_HEADER), v);
        }
    }
    response
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

fn lock(ckpt: &LoadedCheckpoint) -> Result<std::sync::MutexGuard<'_, ModelBundle>, ApiError> {
    ckpt.model
        .lock()
        .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "model lock poisoned"))
}

fn run_translate(state: &AppState, req: TranslateRequest) -> Result<Response, ApiError> {
    let start = Instant::now();
    let ckpt = state.get(&req.checkpoint_id)?;
    let input = decode_b64("input_image", &req.input_image)?;
    let exemplar = decode_b64("exemplar_image", &req.exemplar_image)?;
    let pair = inference::decode_pair(&input, &exemplar, ckpt.resolution)?;
    let m_in = decode_override("input_mask_override", req.input_mask_override.as_deref(), ckpt.resolution)?;
    let m_ex = decode_override(
        "exemplar_mask_override",
        req.exemplar_mask_override.as_deref(),
        ckpt.resolution,
    )?;
    let out = {
        let model = lock(&ckpt)?;
        inference::translate(&model, &pair.input, &pair.exemplar, m_in.as_ref(), m_ex.as_ref())?
    };
    let body = TranslateResponse {
        output_image: encode_b64(&imageio::encode_image(&out.output)?),
        input_mask: encode_b64(&imageio::encode_mask(&out.input_mask)?),
        exemplar_mask: encode_b64(&imageio::encode_mask(&out.exemplar_mask)?),
        timing_ms: elapsed_ms(start),
    };
    Ok(with_resize_header(Json(body), &pair.resized))
}

fn run_masks(state: &AppState, req: MasksRequest) -> Result<Response, ApiError> {
    let start = Instant::now();
    let ckpt = state.get(&req.checkpoint_id)?;
    let input = decode_b64("input_image", &req.input_image)?;
    let exemplar = decode_b64("exemplar_image", &req.exemplar_image)?;
    let pair = inference::decode_pair(&input, &exemplar, ckpt.resolution)?;
    let (m_in, m_ex) = {
        let model = lock(&ckpt)?;
        (
            inference::extract_mask(&model, &pair.input)?,
            inference::extract_mask(&model, &pair.exemplar)?,
        )
    };
    let body = MasksResponse {
        input_mask: encode_b64(&imageio::encode_mask(&m_in)?),
        exemplar_mask: encode_b64(&imageio::encode_mask(&m_ex)?),
        timing_ms: elapsed_ms(start),
    };
    Ok(with_resize_header(Json(body), &pair.resized))
}

async fn translate_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: TranslateRequest = parse_body(&body)?;
    blocking(move || run_translate(&state, req)).await
}

async fn masks_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: MasksRequest = parse_body(&body)?;
    blocking(move || run_masks(&state, req)).await
}

async fn meta_handler(State(state): State<Arc<AppState>>) -> Json<MetaResponse> {
    let checkpoints: Vec<CheckpointInfo> = state
        .checkpoints
        .values()
        .map(|c| CheckpointInfo {
            id: c.id.clone(),
            iteration: c.iteration,
            resolution: c.resolution,
            attributes: c.attribute_names.clone(),
        })
        .collect();
    let default = state.default_id.as_ref().and_then(|id| state.checkpoints.get(id));
    Json(MetaResponse {
        version: env!("CARGO_PKG_VERSION").to_string(),
        default_checkpoint: state.default_id.clone(),
        attributes: default.map(|c| c.attribute_names.clone()).unwrap_or_default(),
        resolution: default.map(|c| c.resolution),
        checkpoints,
    })
}

async fn health_handler(State(state): State<Arc<AppState>>) -> (StatusCode, Json<serde_json::Value>) {
    let loaded = state.checkpoints.len();
    let status = if loaded > 0 {
        StatusCode::OK
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    };
    let label = if loaded > 0 { "ok" } else { "no checkpoint loaded" };
    (status, Json(serde_json::json!({ "status": label, "checkpoints": loaded })))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/translate", post(translate_handler))
        .route("/api/masks", post(masks_handler))
        .route("/api/meta", get(meta_handler))
        .route("/api/health", get(health_handler))
        .with_state(state)
}

/// Serves the API until the process is stopped.
pub async fn serve(state: AppState, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}
