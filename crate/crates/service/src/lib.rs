//! HTTP facade over the pipeline: detection, classification, live label
//! editing and backend health.
//!
//! Endpoints:
//! - `GET /api/health`
//! - `GET /api/config`
//! - `GET|PUT /api/labels`
//! - `POST /api/detect`
//! - `POST /api/classify`
//!
//! Images arrive either as a multipart field named `image` or as a raw body
//! with `Content-Type: image/png` or `image/jpeg`. Options come from query
//! parameters or multipart fields.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use docpipe_core::backends::{BackendKind, BackendImpl};
use docpipe_core::classify::{HypothesisTemplate, LabelSet, UNCLASSIFIED};
use docpipe_core::config::{resolve_workers, AppConfig};
use docpipe_core::detection::TextRegion;
use docpipe_core::error::{ClassifyError, ImagingError};
use docpipe_core::imaging::ColorImage;
use docpipe_core::{Error, Pipeline, StageTimings};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

/// How long a health probe result is reused.
pub const HEALTH_TTL: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub labels: LabelSet,
    pub hypothesis_template: HypothesisTemplate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendHealth {
    #[serde(rename = "impl")]
    pub implementation: BackendImpl,
    pub model_id: String,
    pub ready: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub backends: IndexMap<BackendKind, BackendHealth>,
}

pub struct AppState {
    pipeline: Arc<Pipeline>,
    config: AppConfig,
    labels: RwLock<LabelConfig>,
    health: Mutex<Option<(Instant, IndexMap<BackendKind, BackendHealth>)>>,
    health_ttl: Duration,
    workers: Semaphore,
}

impl AppState {
    pub fn new(config: AppConfig, pipeline: Pipeline) -> Self {
        let workers = resolve_workers(config.service.workers);
        Self {
            labels: RwLock::new(LabelConfig {
                labels: pipeline.settings.labels.clone(),
                hypothesis_template: pipeline.settings.template.clone(),
            }),
            pipeline: Arc::new(pipeline),
            config,
            health: Mutex::new(None),
            health_ttl: HEALTH_TTL,
            workers: Semaphore::new(workers),
        }
    }

    pub fn with_health_ttl(mut self, ttl: Duration) -> Self {
        self.health_ttl = ttl;
        self
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn labels(&self) -> LabelConfig {
        self.labels.read().unwrap_or_else(|p| p.into_inner()).clone()
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    backend: Option<BackendKind>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    backend: Option<BackendKind>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            backend: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.message,
            backend: self.backend,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Imaging(ImagingError::Decode(_)) => ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, message),
            Error::Imaging(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, message),
            Error::Backend { kind, .. } => ApiError {
                status: StatusCode::BAD_GATEWAY,
                message,
                backend: Some(kind),
            },
            Error::Classify(ClassifyError::InvalidLabels(_) | ClassifyError::InvalidTemplate(_)) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, message)
            }
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, message),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
struct RawOptions {
    labels: Option<String>,
    summarize: Option<String>,
    return_regions: Option<String>,
}

#[derive(Debug)]
struct Upload {
    image: Bytes,
    options: RawOptions,
}

fn parse_bool(name: &str, v: &str) -> Result<bool, ApiError> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" | "" => Ok(false),
        _ => Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("`{name}` must be a boolean, got `{v}`"),
        )),
    }
}

/// Accepts a JSON array or a comma-separated list.
fn parse_labels(raw: &str) -> Result<LabelSet, ApiError> {
    let raw = raw.trim();
    let list: Vec<String> = if raw.starts_with('[') {
        serde_json::from_str(raw)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("labels: {e}")))?
    } else {
        raw.split(',').map(|s| s.trim().to_string()).collect()
    };
    LabelSet::new(list).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    ApiError::new(e.status(), e.body_text())
}

async fn read_upload(state: &Arc<AppState>, query: RawOptions, req: Request) -> Result<Upload, ApiError> {
    let content_type = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase();
    let mut options = query;
    if content_type.starts_with("multipart/form-data") {
        let mut mp = Multipart::from_request(req, state)
            .await
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
        let mut image = None;
        while let Some(field) = mp.next_field().await.map_err(multipart_error)? {
            let name = field.name().unwrap_or("").to_string();
            match name.as_str() {
                "image" => image = Some(field.bytes().await.map_err(multipart_error)?),
                "labels" => options.labels = Some(field.text().await.map_err(multipart_error)?),
                "summarize" => options.summarize = Some(field.text().await.map_err(multipart_error)?),
                "return_regions" => options.return_regions = Some(field.text().await.map_err(multipart_error)?),
                _ => {}
            }
        }
        let image = image.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing multipart field `image`"))?;
        Ok(Upload { image, options })
    } else if content_type.starts_with("image/png") || content_type.starts_with("image/jpeg") {
        let image = Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?;
        Ok(Upload { image, options })
    } else {
        Err(ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            format!("expected multipart/form-data, image/png or image/jpeg, got `{content_type}`"),
        ))
    }
}

fn decode(bytes: &[u8]) -> Result<ColorImage, ApiError> {
    ColorImage::decode(bytes).map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, e.to_string()))
}

/// Runs blocking pipeline work on the bounded worker pool.
async fn run_job<T: Send + 'static>(
    state: &Arc<AppState>,
    job: impl FnOnce(&Pipeline) -> Result<T, Error> + Send + 'static,
) -> Result<T, ApiError> {
    let _permit = state
        .workers
        .acquire()
        .await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "shutting down"))?;
    let pipeline = state.pipeline.clone();
    tokio::task::spawn_blocking(move || job(&pipeline))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectResponse {
    pub width: usize,
    pub height: usize,
    pub regions: Vec<TextRegion>,
    pub timing_ms: StageTimings,
}

async fn detect(State(state): State<Arc<AppState>>, Query(q): Query<RawOptions>, req: Request) -> Result<Json<DetectResponse>, ApiError> {
    let upload = read_upload(&state, q, req).await?;
    let img = decode(&upload.image)?;
    let (width, height) = (img.width(), img.height());
    let out = run_job(&state, move |p| p.detect(&img)).await?;
    Ok(Json(DetectResponse {
        width,
        height,
        regions: out.regions,
        timing_ms: out.timings,
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub chosen: String,
    pub unclassified: bool,
    pub label_probs: IndexMap<String, f64>,
    pub width: usize,
    pub height: usize,
    pub regions: Vec<TextRegion>,
    pub summary: Option<String>,
    pub timing_ms: StageTimings,
}

async fn classify(State(state): State<Arc<AppState>>, Query(q): Query<RawOptions>, req: Request) -> Result<Json<ClassifyResponse>, ApiError> {
    let upload = read_upload(&state, q, req).await?;
    let current = state.labels();
    let labels = match upload.options.labels.as_deref() {
        Some(raw) => parse_labels(raw)?,
        None => current.labels,
    };
    let summarize = match upload.options.summarize.as_deref() {
        Some(v) => parse_bool("summarize", v)?,
        None => state.pipeline.settings.summarize,
    };
    let return_regions = match upload.options.return_regions.as_deref() {
        Some(v) => parse_bool("return_regions", v)?,
        None => true,
    };
    let img = decode(&upload.image)?;
    let (width, height) = (img.width(), img.height());
    let template = current.hypothesis_template;
    let out = run_job(&state, move |p| p.classify_document(&img, &labels, &template, summarize)).await?;
    let c = out.classification;
    Ok(Json(ClassifyResponse {
        unclassified: c.chosen == UNCLASSIFIED,
        chosen: c.chosen,
        label_probs: c.label_probs,
        width,
        height,
        regions: if return_regions { out.regions } else { Vec::new() },
        summary: c.summary,
        timing_ms: out.timings,
    }))
}

async fn get_labels(State(state): State<Arc<AppState>>) -> Json<LabelConfig> {
    Json(state.labels())
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum LabelsUpdate {
    List(Vec<String>),
    Full {
        labels: Vec<String>,
        hypothesis_template: Option<String>,
    },
}

async fn put_labels(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<LabelConfig>, ApiError> {
    let update: LabelsUpdate = serde_json::from_slice(&body).map_err(|e| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("expected a list of labels or {{labels, hypothesis_template}}: {e}"),
        )
    })?;
    let (labels, template) = match update {
        LabelsUpdate::List(l) => (l, None),
        LabelsUpdate::Full { labels, hypothesis_template } => (labels, hypothesis_template),
    };
    let unprocessable = |e: ClassifyError| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string());
    let labels = LabelSet::new(labels).map_err(unprocessable)?;
    let template = template.map(HypothesisTemplate::new).transpose().map_err(unprocessable)?;
    let mut guard = state.labels.write().unwrap_or_else(|p| p.into_inner());
    guard.labels = labels;
    if let Some(t) = template {
        guard.hypothesis_template = t;
    }
    log::info!("label set replaced: {:?}", guard.labels.labels());
    Ok(Json(guard.clone()))
}

fn probe(pipeline: &Pipeline) -> IndexMap<BackendKind, BackendHealth> {
    BackendKind::ALL
        .iter()
        .map(|&kind| {
            let d = pipeline.backends.descriptor(kind).cloned();
            let result = pipeline.backends.ping(kind);
            let health = BackendHealth {
                implementation: d.as_ref().map(|d| d.implementation).unwrap_or_default(),
                model_id: d.map(|d| d.model_id).unwrap_or_default(),
                ready: result.is_ok(),
                error: result.err().map(|e| e.to_string()),
            };
            (kind, health)
        })
        .collect()
}

async fn health(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    let cached = {
        let guard = state.health.lock().unwrap_or_else(|p| p.into_inner());
        guard
            .as_ref()
            .filter(|(at, _)| at.elapsed() < state.health_ttl)
            .map(|(_, b)| b.clone())
    };
    let backends = match cached {
        Some(b) => b,
        None => {
            let pipeline = state.pipeline.clone();
            let fresh = tokio::task::spawn_blocking(move || probe(&pipeline))
                .await
                .unwrap_or_default();
            *state.health.lock().unwrap_or_else(|p| p.into_inner()) = Some((Instant::now(), fresh.clone()));
            fresh
        }
    };
    Json(HealthResponse {
        status: "ok".into(),
        backends,
    })
}

async fn get_config(State(state): State<Arc<AppState>>) -> Json<AppConfig> {
    let mut cfg = state.config.clone();
    let current = state.labels();
    cfg.labels = current.labels;
    cfg.hypothesis_template = current.hypothesis_template;
    Json(cfg)
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.service.max_upload_bytes;
    let static_dir = PathBuf::from(&state.config.service.static_dir);
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/config", get(get_config))
        .route("/api/labels", get(get_labels).put(put_labels))
        .route("/api/detect", post(detect))
        .route("/api/classify", post(classify))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state);
    if !static_dir.as_os_str().is_empty() && static_dir.is_dir() {
        api.fallback_service(tower_http::services::ServeDir::new(static_dir))
    } else {
        api
    }
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
