//! HTTP inference service.
//!
//! | route | |
//! |---|---|
//! | `POST /predict` | [`PredictRequest`] → [`PredictResponse`] |
//! | `GET /maps` | maps with thumbnails |
//! | `GET /models` | registry listing |
//! | `GET /healthz` | `ok`, or 503 while loading |
//!
//! Errors are `{"error": "..."}` with 400 (bad request, TX on a building),
//! 404 (unknown map or model) or 503 (models still loading).

use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

use crate::maps::MapStore;
use crate::predict::{run_prediction, PredictError, PredictRequest, PredictResponse};
use crate::registry::Registry;

/// Everything a request reads. Never mutated once published.
#[derive(Debug)]
pub struct Loaded {
    pub registry: Registry,
    pub maps: MapStore,
}

/// Shared service state: empty until loading finishes.
#[derive(Debug, Clone, Default)]
pub struct AppState {
    loaded: Arc<RwLock<Option<Arc<Loaded>>>>,
}

impl AppState {
    pub fn loading() -> Self {
        Self::default()
    }

    pub fn ready(loaded: Loaded) -> Self {
        let s = Self::default();
        s.publish(loaded);
        s
    }

    pub fn publish(&self, loaded: Loaded) {
        *self.loaded.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(loaded));
    }

    fn get(&self) -> Result<Arc<Loaded>, ApiError> {
        self.loaded
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
            .ok_or(ApiError(
                StatusCode::SERVICE_UNAVAILABLE,
                "models are still loading".into(),
            ))
    }
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<PredictError> for ApiError {
    fn from(e: PredictError) -> Self {
        let status = match e {
            PredictError::BadRequest(_) => StatusCode::BAD_REQUEST,
            PredictError::NotFound(_) => StatusCode::NOT_FOUND,
            PredictError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .route("/maps", get(maps))
        .route("/models", get(models))
        .route("/healthz", get(healthz))
        .with_state(state)
}

async fn predict(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<Json<PredictResponse>, ApiError> {
    let req: PredictRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("invalid request: {e}")))?;
    let loaded = state.get()?;
    let out = tokio::task::spawn_blocking(move || {
        run_prediction(&loaded.registry, &loaded.maps, &req).map(|p| p.into_response(&req))
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    log::info!(
        "predict {} on {:?}: {:.1} ms",
        out.model_id,
        out.map_id,
        out.latency_ms
    );
    Ok(Json(out))
}

async fn maps(State(state): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let loaded = state.get()?;
    let list = loaded
        .maps
        .list()
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(json!({ "maps": list })))
}

async fn models(State(state): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let loaded = state.get()?;
    Ok(Json(json!({ "models": loaded.registry.list() })))
}

async fn healthz(State(state): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    state.get()?;
    Ok(Json(json!({ "status": "ok" })))
}
