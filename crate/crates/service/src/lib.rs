//! HTTP edit sessions over one read-only checkpoint.
//!
//! Routes:
//!
//! | method | path                   | body                                   |
//! |--------|------------------------|----------------------------------------|
//! | GET    | `/attributes`          |                                        |
//! | POST   | `/session`             | `{"source": {"seed": 7}}` or `{"source": {"image": "<base64 png>"}}` |
//! | POST   | `/session/{id}/edit`   | `{"delta": {"size": 0.2}, "mode": "relative"}` |
//! | POST   | `/session/{id}/reset`  |                                        |
//! | GET    | `/session/{id}/image`  | returns `image/png`                    |
//!
//! Edits on one session run strictly in arrival order; different sessions
//! proceed independently.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use latent_steer::persist::Checkpoint;
use latent_steer::{EditMode, EditSession, Image, InversionConfig, LoadedEditor, ModelBundle, ToyConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Mutex;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use uuid::Uuid;

pub const DEFAULT_PORT: u16 = 8640;
pub const DEFAULT_INVERSION_STEPS: usize = 500;

/// What happens to an edit that arrives while the same session is busy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BusyPolicy {
    /// Wait for the running edit, then apply.
    #[default]
    Queue,
    /// Answer 409 immediately.
    Reject,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServiceConfig {
    pub inversion: InversionConfig,
    pub busy: BusyPolicy,
    /// Allowed CORS origin; `None` allows any.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            inversion: InversionConfig {
                steps: DEFAULT_INVERSION_STEPS,
                ..InversionConfig::default()
            },
            busy: BusyPolicy::Queue,
            cors_origin: None,
        }
    }
}

/// Frozen models plus the editor read from a checkpoint. Shared by every
/// session and never mutated.
pub struct Model {
    pub bundle: ModelBundle,
    pub editor: LoadedEditor,
}

impl Model {
    pub fn new(bundle: ModelBundle, editor: LoadedEditor) -> latent_steer::Result<Self> {
        editor.check_compatible(&bundle)?;
        Ok(Self { bundle, editor })
    }

    /// Load a checkpoint. The world comes from its config snapshot, or the
    /// default toy world when it has none.
    pub fn load(path: &Path) -> latent_steer::Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let bundle = match &ckpt.config {
            Some(cfg) => cfg.bundle()?,
            None => ModelBundle::toy(ToyConfig::default())?,
        };
        Self::new(bundle, ckpt.editor()?)
    }
}

struct SessionEntry {
    session: EditSession,
    created_at: u64,
}

pub struct AppState {
    model: Option<Arc<Model>>,
    config: ServiceConfig,
    sessions: RwLock<HashMap<Uuid, Arc<Mutex<SessionEntry>>>>,
}

impl AppState {
    pub fn new(model: Option<Model>, config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            model: model.map(Arc::new),
            config,
            sessions: RwLock::new(HashMap::new()),
        })
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session table poisoned").len()
    }

    fn model(&self) -> Result<Arc<Model>, ApiError> {
        self.model
            .clone()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no checkpoint loaded"))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<SessionEntry>>, ApiError> {
        let missing = || ApiError::new(StatusCode::NOT_FOUND, format!("unknown session `{id}`"));
        let id = Uuid::parse_str(id).map_err(|_| missing())?;
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(&id)
            .cloned()
            .ok_or_else(missing)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let origin = match &state.config.cors_origin {
        Some(o) => HeaderValue::from_str(o).map(AllowOrigin::exact).unwrap_or_else(|_| AllowOrigin::any()),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new().allow_origin(origin).allow_methods(Any).allow_headers(Any);
    Router::new()
        .route("/attributes", get(attributes))
        .route("/session", post(create_session))
        .route("/session/{id}/edit", post(edit))
        .route("/session/{id}/reset", post(reset))
        .route("/session/{id}/image", get(image))
        .layer(cors)
        .with_state(state)
}

/// Bind `addr` and serve until the process is stopped.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
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

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributeInfo {
    pub index: usize,
    pub name: String,
    pub latent_dim: usize,
    pub num_attributes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Seed(u64),
    /// Base64 PNG.
    Image(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub source: Source,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub created_at: u64,
    /// Base64 PNG of the session's original render.
    pub original: String,
    pub attributes: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inversion_mse: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    #[serde(default)]
    pub delta: BTreeMap<String, f64>,
    #[serde(default)]
    pub mode: EditMode,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditResponse {
    /// Base64 PNG of the edited render.
    pub image: String,
    pub attributes: Vec<f64>,
    pub requested: Vec<f64>,
    pub applied: Vec<f64>,
    pub clip_adjustments: Vec<f64>,
    pub identity: f64,
}

fn png_b64(img: &Image) -> Result<String, ApiError> {
    Ok(STANDARD.encode(img.to_png().map_err(ApiError::internal)?))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

async fn attributes(State(state): State<Arc<AppState>>) -> Result<Json<Vec<AttributeInfo>>, ApiError> {
    let model = state.model()?;
    let b = &model.bundle;
    Ok(Json(
        b.regressor
            .attribute_names()
            .into_iter()
            .enumerate()
            .map(|(index, name)| AttributeInfo {
                index,
                name,
                latent_dim: b.latent_dim(),
                num_attributes: b.num_attributes(),
            })
            .collect(),
    ))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<Json<SessionView>, ApiError> {
    let Json(body) = body?;
    let model = state.model()?;
    let inversion = state.config.inversion.clone();
    let session = blocking(move || {
        let b = &model.bundle;
        match body.source {
            Source::Seed(seed) => EditSession::from_seed(b, seed).map_err(ApiError::internal),
            Source::Image(data) => {
                let bytes = STANDARD
                    .decode(data.trim())
                    .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("image is not base64: {e}")))?;
                let img = Image::from_png(&bytes)
                    .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
                if img.shape() != b.image_shape() {
                    return Err(ApiError::new(
                        StatusCode::UNPROCESSABLE_ENTITY,
                        format!("image is {:?}, model renders {:?}", img.shape(), b.image_shape()),
                    ));
                }
                EditSession::from_image(b, &img, &inversion, 0).map_err(ApiError::internal)
            }
        }
    })
    .await?;
    let id = Uuid::new_v4();
    let entry = SessionEntry {
        session,
        created_at: now(),
    };
    let view = view(id, &entry)?;
    state
        .sessions
        .write()
        .expect("session table poisoned")
        .insert(id, Arc::new(Mutex::new(entry)));
    Ok(Json(view))
}

fn view(id: Uuid, e: &SessionEntry) -> Result<SessionView, ApiError> {
    Ok(SessionView {
        session_id: id.to_string(),
        created_at: e.created_at,
        original: png_b64(e.session.original())?,
        attributes: e.session.attributes().as_slice().to_vec(),
        inversion_mse: e.session.inversion_mse(),
    })
}

async fn lock(
    state: &AppState,
    entry: Arc<Mutex<SessionEntry>>,
) -> Result<tokio::sync::OwnedMutexGuard<SessionEntry>, ApiError> {
    match state.config.busy {
        BusyPolicy::Queue => Ok(entry.lock_owned().await),
        BusyPolicy::Reject => entry
            .try_lock_owned()
            .map_err(|_| ApiError::new(StatusCode::CONFLICT, "another edit on this session is in progress")),
    }
}

async fn edit(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<EditRequest>, JsonRejection>,
) -> Result<Json<EditResponse>, ApiError> {
    let model = state.model()?;
    let entry = state.session(&id)?;
    let Json(req) = body?;
    let mut guard = lock(&state, entry).await?;
    blocking(move || {
        let out = guard
            .session
            .edit(&model.bundle, &model.editor, &req.delta, req.mode)
            .map_err(|e| match e {
                latent_steer::Error::InvalidValue { .. } => ApiError::new(StatusCode::BAD_REQUEST, e.to_string()),
                e => ApiError::internal(e),
            })?;
        Ok(Json(EditResponse {
            image: png_b64(&out.image)?,
            attributes: out.attributes.as_slice().to_vec(),
            requested: out.requested,
            applied: out.applied.as_slice().to_vec(),
            clip_adjustments: out.clip_adjustments,
            identity: out.identity,
        }))
    })
    .await
}

async fn reset(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    let entry = state.session(&id)?;
    let mut guard = lock(&state, entry).await?;
    guard.session.reset();
    let uuid = Uuid::parse_str(&id).map_err(ApiError::internal)?;
    Ok(Json(view(uuid, &guard)?))
}

async fn image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let entry = state.session(&id)?;
    let guard = lock(&state, entry).await?;
    let png = guard.session.image().to_png().map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}
