//! Routes under `/v1`. Errors are JSON: `{"error": {"status", "code", "message"}}`.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::multipart::MultipartError;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use covidscreen_core::cam::{encode_png, grad_cam, render_overlay};
use covidscreen_core::data::Modality;
use covidscreen_core::preprocess::{run_pipeline, sample_rng, Mode, RasterImage};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;
use tower_http::trace::TraceLayer;

use crate::config::ServiceConfig;
use crate::models::{parse_class as parse_class_name, LoadedModel, Registry};
use crate::store::{Case, NewCase, OverlayKey, Store, Triage, TriageOutcome};
use crate::ServiceError;

/// Multipart framing allowance on top of the image limit.
const MULTIPART_OVERHEAD: usize = 64 * 1024;
const MAX_PAGE: usize = 500;
const DEFAULT_PAGE: usize = 50;

#[derive(Clone)]
pub struct AppState {
    pub config: Arc<ServiceConfig>,
    pub store: Arc<Store>,
    registry: Arc<RwLock<Arc<Registry>>>,
    workers: Arc<Semaphore>,
}

impl AppState {
    /// Opens the store and loads the configured checkpoints (blocking).
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let store = Store::open(&config.store_path)?;
        let registry = Registry::load(&config);
        Ok(Self {
            workers: Arc::new(Semaphore::new(config.workers)),
            config: Arc::new(config),
            store: Arc::new(store),
            registry: Arc::new(RwLock::new(Arc::new(registry))),
        })
    }

    pub fn registry(&self) -> Arc<Registry> {
        self.registry.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    fn model(&self, modality: Modality) -> Result<Arc<LoadedModel>, ApiError> {
        self.registry().get(modality).ok_or_else(|| {
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model_unavailable", format!("no {modality} model is loaded"))
        })
    }

    /// Runs blocking model work on the worker pool.
    async fn run<T: Send + 'static>(
        &self,
        job: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
    ) -> Result<T, ApiError> {
        let permit = self.workers.clone().acquire_owned().await.map_err(ApiError::internal)?;
        tokio::task::spawn_blocking(move || {
            let _permit = permit;
            job()
        })
        .await
        .map_err(ApiError::internal)?
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    case: Option<Case>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), case: None }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        tracing::error!(error = %e, "request failed");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }

    fn unprocessable(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "case_not_found", format!("no case {id}"))
    }

    fn too_large(limit: usize) -> Self {
        Self::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", format!("image exceeds {limit} bytes"))
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError::internal(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": { "status": self.status.as_u16(), "code": self.code, "message": self.message } });
        if let Some(case) = self.case {
            body["case"] = serde_json::to_value(case).unwrap_or_default();
        }
        (self.status, Json(body)).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.config.max_upload_bytes + MULTIPART_OVERHEAD;
    let protected = Router::new()
        .route("/v1/predict", post(predict))
        .route("/v1/cases", get(list_cases))
        .route("/v1/cases/{id}", get(get_case))
        .route("/v1/cases/{id}/image", get(get_image))
        .route("/v1/cases/{id}/cam", get(get_cam))
        .route("/v1/cases/{id}/triage", post(triage))
        .route("/v1/admin/reload", post(reload))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/v1/health", get(health))
        .merge(protected)
        .layer(DefaultBodyLimit::max(limit))
        .layer(TraceLayer::new_for_http())
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.config.api_token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            let mut resp = ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token").into_response();
            resp.headers_mut().insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
            return resp;
        }
    }
    next.run(req).await
}

fn health_body(state: &AppState) -> serde_json::Value {
    let registry = state.registry();
    let models: BTreeMap<&str, _> = registry.status().into_iter().map(|(m, s)| (m.as_str(), s)).collect();
    json!({
        "status": if registry.all_loaded() { "ok" } else { "degraded" },
        "models": models,
        "max_upload_bytes": state.config.max_upload_bytes,
        "workers": state.config.workers,
        "version": env!("CARGO_PKG_VERSION"),
    })
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(health_body(&state))
}

async fn reload(State(state): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let config = state.config.clone();
    let fresh = tokio::task::spawn_blocking(move || Registry::load(&config)).await.map_err(ApiError::internal)?;
    *state.registry.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(fresh);
    Ok(Json(health_body(&state)))
}

fn multipart_error(e: MultipartError) -> ApiError {
    let status = e.status();
    let code = if status == StatusCode::PAYLOAD_TOO_LARGE { "payload_too_large" } else { "bad_multipart" };
    ApiError::new(status, code, e.body_text())
}

#[derive(Serialize)]
struct PredictResponse {
    #[serde(flatten)]
    case: Case,
    inference_ms: f64,
}

async fn predict(State(state): State<AppState>, mut form: Multipart) -> Result<Json<PredictResponse>, ApiError> {
    let mut file: Option<(Option<String>, Bytes)> = None;
    let mut modality: Option<String> = None;
    while let Some(field) = form.next_field().await.map_err(multipart_error)? {
        match field.name() {
            Some("file") | Some("image") => {
                let name = field.file_name().map(str::to_string);
                file = Some((name, field.bytes().await.map_err(multipart_error)?));
            }
            Some("modality") => modality = Some(field.text().await.map_err(multipart_error)?),
            _ => {}
        }
    }
    let (filename, bytes) =
        file.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing_file", "multipart field `file` is required"))?;
    let limit = state.config.max_upload_bytes;
    if bytes.len() > limit {
        return Err(ApiError::too_large(limit));
    }
    let modality: Modality = modality
        .ok_or_else(|| ApiError::unprocessable("missing_modality", "multipart field `modality` is required"))?
        .parse()
        .map_err(|e: String| ApiError::unprocessable("unsupported_modality", e))?;
    let model = state.model(modality)?;

    let job_bytes = bytes.clone();
    let job_model = model.clone();
    let (prediction, inference_ms) = state
        .run(move || {
            let img = RasterImage::from_bytes(&job_bytes)
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "undecodable_image", e.to_string()))?;
            let t = run_pipeline(&img, Mode::Eval, &mut sample_rng(0, 0, 0), &job_model.preprocess)
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "undecodable_image", e.to_string()))?;
            let start = Instant::now();
            let p = job_model.model.predict_images(&[t]).map_err(ApiError::internal)?.remove(0);
            Ok((p, start.elapsed().as_secs_f64() * 1e3))
        })
        .await?;

    let sha = format!("{:x}", Sha256::digest(&bytes));
    let content_type = image::guess_format(&bytes).map(|f| f.to_mime_type()).unwrap_or("application/octet-stream");
    let (probs, predicted_label) = model.describe(&prediction);
    let new = NewCase {
        case_id: uuid::Uuid::new_v4().to_string(),
        modality: modality.as_str().to_string(),
        image_sha256: sha.clone(),
        filename,
        probabilities: probs.into_iter().collect(),
        predicted_label,
        model_version: model.version.clone(),
    };
    let store = state.store.clone();
    let case = tokio::task::spawn_blocking(move || {
        store.put_image(&sha, content_type, &bytes)?;
        store.insert_case(&new)
    })
    .await
    .map_err(ApiError::internal)??;
    tracing::info!(case_id = %case.case_id, label = %case.predicted_label, inference_ms, "prediction stored");
    Ok(Json(PredictResponse { case, inference_ms }))
}

fn load_case(state: &AppState, id: &str) -> Result<Case, ApiError> {
    state.store.get_case(id)?.ok_or_else(|| ApiError::not_found(id))
}

async fn get_case(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Case>, ApiError> {
    Ok(Json(load_case(&state, &id)?))
}

async fn get_image(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let case = load_case(&state, &id)?;
    let (content_type, bytes) = state
        .store
        .get_image(&case.image_sha256)?
        .ok_or_else(|| ApiError::internal(format!("image {} missing from store", case.image_sha256)))?;
    Ok(([(header::CONTENT_TYPE, content_type)], bytes).into_response())
}

fn parse_class(raw: &str, model: &LoadedModel) -> Result<usize, ApiError> {
    parse_class_name(model.task(), raw).ok_or_else(|| {
        ApiError::unprocessable("invalid_class", format!("class {raw:?} is not one of {:?}", model.class_names()))
    })
}

fn parse_alpha(raw: Option<&String>, default: f64) -> Result<f64, ApiError> {
    let Some(raw) = raw else { return Ok(default) };
    match raw.parse::<f64>() {
        Ok(a) if (0.0..=1.0).contains(&a) => Ok(a),
        _ => Err(ApiError::unprocessable("invalid_alpha", format!("alpha {raw:?} must be a number in [0, 1]"))),
    }
}

async fn get_cam(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(params): Query<HashMap<String, String>>,
) -> Result<Response, ApiError> {
    let case = load_case(&state, &id)?;
    let modality: Modality = case.modality.parse().map_err(ApiError::internal)?;
    let model = state.model(modality)?;
    let class = match params.get("class") {
        Some(raw) => parse_class(raw, &model)?,
        None => model.default_class(&case.predicted_label),
    };
    let alpha = parse_alpha(params.get("alpha"), state.config.default_alpha)?;
    let key = OverlayKey { case_id: case.case_id.clone(), class, alpha: format!("{alpha}"), model_version: model.version.clone() };

    let png = match state.store.get_overlay(&key)? {
        Some(png) => png,
        None => {
            let (_, bytes) = state
                .store
                .get_image(&case.image_sha256)?
                .ok_or_else(|| ApiError::internal("case image missing from store"))?;
            let job_model = model.clone();
            let png = state
                .run(move || {
                    let img = RasterImage::from_bytes(&bytes).map_err(ApiError::internal)?;
                    let t = run_pipeline(&img, Mode::Eval, &mut sample_rng(0, 0, 0), &job_model.preprocess)
                        .map_err(ApiError::internal)?;
                    let cam = grad_cam(&job_model.model, &t, class).map_err(ApiError::internal)?;
                    let (w, h) = (img.width(), img.height());
                    let overlay =
                        render_overlay(&img.to_rgb8(), &cam.resized(h, w), w, h, alpha).map_err(ApiError::internal)?;
                    encode_png(&overlay).map_err(ApiError::internal)
                })
                .await?;
            state.store.put_overlay(&key, &png)?;
            png
        }
    };
    let class_name = model.class_names()[class];
    Ok((
        [
            (header::CONTENT_TYPE, "image/png".to_string()),
            (header::HeaderName::from_static("x-model-version"), model.version.clone()),
            (header::HeaderName::from_static("x-cam-class"), class_name.to_string()),
        ],
        png,
    )
        .into_response())
}

#[derive(Deserialize)]
struct TriageRequest {
    decision: String,
    #[serde(default)]
    note: Option<String>,
    #[serde(default)]
    reviewer: Option<String>,
    #[serde(default)]
    expected_revision: Option<u64>,
}

async fn triage(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<Case>, ApiError> {
    let req: TriageRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_json", e.to_string()))?;
    let decision: Triage = req.decision.parse().map_err(|e: String| ApiError::unprocessable("invalid_decision", e))?;
    if decision == Triage::Unreviewed {
        return Err(ApiError::unprocessable("invalid_decision", "a case cannot be returned to UNREVIEWED"));
    }
    match state.store.triage(&id, decision, req.reviewer.as_deref(), req.note.as_deref(), req.expected_revision)? {
        TriageOutcome::Updated(case) => {
            tracing::info!(case_id = %id, decision = decision.as_str(), revision = case.revision, "triage recorded");
            Ok(Json(case))
        }
        TriageOutcome::NotFound => Err(ApiError::not_found(&id)),
        TriageOutcome::Conflict(current) => Err(ApiError {
            case: Some(current.clone()),
            ..ApiError::new(
                StatusCode::CONFLICT,
                "revision_conflict",
                format!("case is at revision {}, request expected {:?}", current.revision, req.expected_revision),
            )
        }),
    }
}

#[derive(Serialize)]
struct CaseList {
    cases: Vec<Case>,
    total: u64,
    limit: usize,
    offset: usize,
}

async fn list_cases(
    State(state): State<AppState>,
    Query(params): Query<HashMap<String, String>>,
) -> Result<Json<CaseList>, ApiError> {
    let triage = params
        .get("triage")
        .map(|t| t.parse::<Triage>())
        .transpose()
        .map_err(|e| ApiError::unprocessable("invalid_filter", e))?;
    let modality = params
        .get("modality")
        .map(|m| m.parse::<Modality>())
        .transpose()
        .map_err(|e| ApiError::unprocessable("invalid_filter", e))?;
    let number = |key: &str, default: usize| -> Result<usize, ApiError> {
        params.get(key).map_or(Ok(default), |v| {
            v.parse().map_err(|_| ApiError::unprocessable("invalid_filter", format!("{key} must be a non-negative integer")))
        })
    };
    let limit = number("limit", DEFAULT_PAGE)?;
    if limit == 0 || limit > MAX_PAGE {
        return Err(ApiError::unprocessable("invalid_filter", format!("limit must be in 1..={MAX_PAGE}")));
    }
    let offset = number("offset", 0)?;
    let (mut cases, total) = state.store.list_cases(triage, modality.map(Modality::as_str), limit, offset)?;
    for c in &mut cases {
        c.history.clear();
    }
    Ok(Json(CaseList { cases, total, limit, offset }))
}
