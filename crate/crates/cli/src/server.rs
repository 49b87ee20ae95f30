//! HTTP API: `POST /api/transfer`, `GET /api/models`, `GET /healthz`, and
//! optional static hosting of the studio build under `/`.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use petalgan::serve::{transfer_image, ModelChoice, ModelInfo, ModelRegistry, Resolution, TransferRequest};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::services::{ServeDir, ServeFile};

/// Upper bound on request bodies; dermoscopy photos can be large.
pub const MAX_UPLOAD_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug)]
pub struct HttpError {
    status: StatusCode,
    body: ApiError,
}

impl HttpError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>, field: Option<&str>) -> Self {
        Self {
            status,
            body: ApiError {
                code: code.into(),
                message: message.into(),
                field: field.map(str::to_string),
            },
        }
    }

    fn missing(field: &'static str) -> Self {
        Self::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "validation_error",
            format!("multipart field `{field}` is required"),
            Some(field),
        )
    }
}

impl From<petalgan::Error> for HttpError {
    fn from(e: petalgan::Error) -> Self {
        let status = match e.code() {
            "validation_error" => StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_image" | "input_too_small" => StatusCode::BAD_REQUEST,
            "model_unavailable" => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.code(), e.to_string(), e.field())
    }
}

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Clone)]
pub struct AppState {
    registry: Arc<ModelRegistry>,
    permits: Arc<Semaphore>,
}

impl AppState {
    /// `max_concurrent` bounds simultaneous inferences (at least 1).
    pub fn new(registry: ModelRegistry, max_concurrent: usize) -> Self {
        Self {
            registry: Arc::new(registry),
            permits: Arc::new(Semaphore::new(max_concurrent.max(1))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsResponse {
    pub models: Vec<ModelInfo>,
    pub resolutions: Vec<Resolution>,
}

async fn healthz() -> &'static str {
    "ok"
}

async fn models(State(state): State<AppState>) -> Json<ModelsResponse> {
    Json(ModelsResponse {
        models: state.registry.models(),
        resolutions: Resolution::ALL.to_vec(),
    })
}

async fn transfer(State(state): State<AppState>, mut form: Multipart) -> Result<Response, HttpError> {
    let bad_form = |e: axum::extract::multipart::MultipartError| {
        HttpError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text(), None)
    };
    let (mut image, mut model, mut resolution) = (None, None, None);
    while let Some(field) = form.next_field().await.map_err(bad_form)? {
        match field.name().unwrap_or_default() {
            "image" => image = Some(field.bytes().await.map_err(bad_form)?.to_vec()),
            "model" => model = Some(field.text().await.map_err(bad_form)?),
            "resolution" => resolution = Some(field.text().await.map_err(bad_form)?),
            _ => {}
        }
    }
    // Validate the cheap fields before looking at the image.
    let resolution: Resolution = resolution.ok_or_else(|| HttpError::missing("resolution"))?.parse()?;
    let model: ModelChoice = model.ok_or_else(|| HttpError::missing("model"))?.parse()?;
    let image = image.ok_or_else(|| HttpError::missing("image"))?;
    let req = TransferRequest {
        image,
        model,
        resolution,
    };

    let _permit = state.permits.clone().acquire_owned().await.map_err(|_| {
        HttpError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "shutting_down",
            "server is shutting down",
            None,
        )
    })?;
    let registry = state.registry.clone();
    let png = tokio::task::spawn_blocking(move || transfer_image(&req, &registry))
        .await
        .map_err(|e| HttpError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string(), None))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn not_found() -> HttpError {
    HttpError::new(StatusCode::NOT_FOUND, "not_found", "no such route", None)
}

/// Builds the service. With `static_dir`, unknown paths fall through to the
/// studio build (with `index.html` for client-side routes).
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/api/models", get(models))
        .route("/api/transfer", post(transfer))
        .route("/api/{*rest}", get(not_found).post(not_found))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state);
    match static_dir {
        Some(dir) => {
            let index = dir.join("index.html");
            api.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)))
        }
        None => api.fallback(not_found),
    }
}

pub async fn serve(state: AppState, static_dir: Option<PathBuf>, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| anyhow::anyhow!("cannot bind {bind}: {e}"))?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
