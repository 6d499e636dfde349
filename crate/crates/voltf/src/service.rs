//! HTTP/JSON facade over the pipeline, used by the editor UI.
//!
//! Volumes and models persist in a [`Store`]; sessions live in memory only.
//! A session serializes its mutating requests behind an async gate while
//! renders and reads take a short snapshot of its state.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use voltf_core::autoplace::autoplace_filters;
use voltf_core::histogram::render_histogram_image;
use voltf_core::neural::MlpNetwork;
use voltf_core::png::encode_gray;
use voltf_core::renderer::{Camera, RenderSettings};
use voltf_core::transfer_function::{validate_filters, FilterSpec, TfError};
use voltf_core::volume::VolumeHeader;

use crate::store::{Store, StoreError};
use crate::{default_camera, Prepared};

/// Default cap: 512³ voxels.
pub const DEFAULT_MAX_VOXELS: usize = 512 * 512 * 512;
/// Request header carrying the volume header JSON on `POST /volumes`.
pub const VOLUME_HEADER: &str = "x-volume-header";

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            field: None,
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {}", what.into()))
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(field) = self.field {
            body["field"] = json!(field);
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<TfError> for ApiError {
    fn from(e: TfError) -> Self {
        let TfError::InvalidFilter { field, reason } = &e;
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: format!("{field} {reason}"),
            field: Some(field.clone()),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(what) => ApiError::not_found(what),
            StoreError::Volume(e) => ApiError::invalid(e.to_string()),
            StoreError::Model(e) => ApiError::invalid(e.to_string()),
            StoreError::Io(e) => ApiError::internal(e),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(e.status(), e.body_text())
    }
}

#[derive(Debug, Clone)]
struct SessionState {
    volume_id: String,
    model_id: Option<String>,
    filters: Vec<FilterSpec>,
    camera: Option<Camera>,
}

#[derive(Debug)]
struct Session {
    gate: tokio::sync::Mutex<()>,
    state: RwLock<SessionState>,
}

impl Session {
    fn snapshot(&self) -> SessionState {
        self.state.read().expect("session lock").clone()
    }
}

pub struct AppState {
    store: Store,
    max_voxels: usize,
    volumes: Mutex<HashMap<String, Arc<Prepared>>>,
    models: Mutex<HashMap<String, Arc<MlpNetwork>>>,
    sessions: Mutex<HashMap<String, Arc<Session>>>,
}

impl AppState {
    pub fn new(store: Store, max_voxels: usize) -> Self {
        AppState {
            store,
            max_voxels,
            volumes: Mutex::default(),
            models: Mutex::default(),
            sessions: Mutex::default(),
        }
    }

    async fn volume(self: &Arc<Self>, id: &str) -> Result<Arc<Prepared>, ApiError> {
        if let Some(p) = self.volumes.lock().expect("volume cache").get(id) {
            return Ok(p.clone());
        }
        let this = self.clone();
        let key = id.to_owned();
        let prepared = blocking(move || -> Result<Prepared, ApiError> {
            Ok(Prepared::new(this.store.get_volume(&key)?))
        })
        .await??;
        let prepared = Arc::new(prepared);
        self.volumes
            .lock()
            .expect("volume cache")
            .insert(id.to_owned(), prepared.clone());
        Ok(prepared)
    }

    fn model(&self, id: &str) -> Result<Arc<MlpNetwork>, ApiError> {
        let mut cache = self.models.lock().expect("model cache");
        if let Some(m) = cache.get(id) {
            return Ok(m.clone());
        }
        let net = Arc::new(self.store.get_model(id)?);
        cache.insert(id.to_owned(), net.clone());
        Ok(net)
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .lock()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("session {id}")))
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)
}

type Shared = State<Arc<AppState>>;

/// Builds the router over `state`.
pub fn router(state: Arc<AppState>) -> Router {
    // a little headroom for the largest accepted 16-bit volume
    let body_limit = state.max_voxels.saturating_mul(2).saturating_add(1 << 20);
    Router::new()
        .route("/volumes", post(upload_volume).get(list_volumes))
        .route("/volumes/{id}/histogram", get(histogram_json))
        .route("/volumes/{id}/histogram.png", get(histogram_png))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/filters", get(get_filters).put(put_filters))
        .route("/sessions/{id}/autoplace", post(autoplace))
        .route("/sessions/{id}/render", post(render_session))
        .route("/models", get(list_models).post(upload_model))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

async fn upload_volume(State(app): Shared, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let text = headers
        .get(VOLUME_HEADER)
        .ok_or_else(|| ApiError::invalid(format!("missing {VOLUME_HEADER} request header")))?
        .to_str()
        .map_err(|_| ApiError::invalid(format!("{VOLUME_HEADER} is not valid UTF-8")))?;
    let header = VolumeHeader::from_json(text).map_err(|e| ApiError::invalid(e.to_string()))?;
    let voxels = header.voxel_count();
    if voxels > app.max_voxels {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("volume has {voxels} voxels, limit is {}", app.max_voxels),
        ));
    }
    let store = app.store.clone();
    let (id, volume) = blocking(move || store.put_volume(&header, &body)).await??;
    let prepared = Arc::new(blocking(move || Prepared::new(volume)).await?);
    app.volumes.lock().expect("volume cache").insert(id.clone(), prepared);
    Ok((StatusCode::CREATED, Json(json!({ "volume_id": id }))).into_response())
}

async fn list_volumes(State(app): Shared) -> Result<Json<serde_json::Value>, ApiError> {
    Ok(Json(json!({ "volumes": app.store.list_volumes()? })))
}

async fn histogram_json(State(app): Shared, Path(id): Path<String>) -> Result<Response, ApiError> {
    let prepared = app.volume(&id).await?;
    let body = blocking(move || prepared.histogram.to_json()).await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

async fn histogram_png(State(app): Shared, Path(id): Path<String>) -> Result<Response, ApiError> {
    let prepared = app.volume(&id).await?;
    let png = blocking(move || encode_gray(&render_histogram_image(&prepared.histogram))).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Deserialize)]
struct NewSession {
    volume_id: String,
    model_id: Option<String>,
}

async fn create_session(
    State(app): Shared,
    body: Result<Json<NewSession>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body?;
    app.volume(&req.volume_id).await?;
    if let Some(model) = &req.model_id {
        app.model(model)?;
    }
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = Session {
        gate: tokio::sync::Mutex::new(()),
        state: RwLock::new(SessionState {
            volume_id: req.volume_id,
            model_id: req.model_id,
            filters: Vec::new(),
            camera: None,
        }),
    };
    app.sessions
        .lock()
        .expect("session table")
        .insert(id.clone(), Arc::new(session));
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))).into_response())
}

async fn get_filters(State(app): Shared, Path(id): Path<String>) -> Result<Json<Vec<FilterSpec>>, ApiError> {
    Ok(Json(app.session(&id)?.snapshot().filters))
}

async fn put_filters(
    State(app): Shared,
    Path(id): Path<String>,
    body: Result<Json<Vec<FilterSpec>>, JsonRejection>,
) -> Result<Json<Vec<FilterSpec>>, ApiError> {
    let session = app.session(&id)?;
    let Json(filters) = body?;
    let _gate = session.gate.lock().await;
    validate_filters(&filters)?;
    session.state.write().expect("session lock").filters = filters.clone();
    Ok(Json(filters))
}

async fn autoplace(State(app): Shared, Path(id): Path<String>) -> Result<Json<Vec<FilterSpec>>, ApiError> {
    let session = app.session(&id)?;
    let _gate = session.gate.lock().await;
    let snapshot = session.snapshot();
    let model_id = snapshot
        .model_id
        .ok_or_else(|| ApiError::invalid("session has no model"))?;
    let net = app.model(&model_id)?;
    let prepared = app.volume(&snapshot.volume_id).await?;
    let filters = blocking(move || autoplace_filters(&net, &prepared.histogram))
        .await?
        .map_err(|e| ApiError::invalid(e.to_string()))?;
    session.state.write().expect("session lock").filters = filters.clone();
    Ok(Json(filters))
}

#[derive(Deserialize, Serialize, Default)]
pub struct RenderRequest {
    #[serde(default)]
    pub camera: Option<Camera>,
    #[serde(default)]
    pub settings: Option<RenderSettings>,
}

async fn render_session(
    State(app): Shared,
    Path(id): Path<String>,
    body: Result<Json<RenderRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let session = app.session(&id)?;
    let Json(req) = body?;
    let snapshot = session.snapshot();
    let prepared = app.volume(&snapshot.volume_id).await?;
    let camera = req
        .camera
        .or(snapshot.camera)
        .unwrap_or_else(|| default_camera(prepared.volume.dims()));
    let settings = req.settings.unwrap_or_default();
    let filters = snapshot.filters;
    let cam = camera.clone();
    let png = blocking(move || prepared.render_png(&filters, &cam, &settings))
        .await?
        .map_err(|e| ApiError::invalid(e.to_string()))?;
    session.state.write().expect("session lock").camera = Some(camera);
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn list_models(State(app): Shared) -> Result<Json<serde_json::Value>, ApiError> {
    Ok(Json(json!({ "models": app.store.list_models()? })))
}

async fn upload_model(State(app): Shared, body: Bytes) -> Result<Response, ApiError> {
    let store = app.store.clone();
    let (id, net) = blocking(move || store.put_model(&body)).await??;
    app.models.lock().expect("model cache").insert(id.clone(), Arc::new(net));
    Ok((StatusCode::CREATED, Json(json!({ "model_id": id }))).into_response())
}

/// Serves the API until interrupted.
pub async fn serve(store: Store, port: u16, max_voxels: usize) -> anyhow::Result<()> {
    let app = router(Arc::new(AppState::new(store, max_voxels)));
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
