//! HTTP routes of the review service.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::header::{HeaderName, HeaderValue, CONTENT_TYPE};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use reid_core::datagen::Side;
use reid_core::ensemble::classify_direction;
use reid_core::features::featurize;
use reid_core::image::HsvImage;
use reid_core::io::Checkpoint;
use reid_core::metricnet::Embedding;
use reid_core::retrieval::Gallery;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use tokio::sync::RwLock;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::error::ServiceError;
use crate::journal::Store;
use crate::state::{Event, JournalRecord, Metrics, Novelty, Resolution, ServiceState, Task, TaskStatus};
use crate::thumbnail::encode_png;

pub const GALLERY_VERSION_HEADER: &str = "x-gallery-version";
pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_THRESHOLD: f64 = 0.82;
pub const DEFAULT_ACTOR: &str = "anonymous";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub top_k: usize,
    pub threshold: f64,
    /// Accepted `(height, width)` of ingested images.
    pub image_size: (usize, usize),
    /// Gallery mutations between snapshots; 0 disables snapshots.
    pub snapshot_every: u64,
    /// Origin allowed by CORS; `None` or `"*"` allows any.
    pub cors_origin: Option<String>,
}

impl ServiceConfig {
    /// Defaults for a model whose backbone takes `input_size` square images.
    pub fn for_input(input_size: usize) -> Self {
        Self { top_k: DEFAULT_TOP_K, threshold: DEFAULT_THRESHOLD, image_size: (input_size, input_size), snapshot_every: 50, cors_origin: None }
    }
}

struct Inner {
    state: ServiceState,
    store: Option<Store>,
    since_snapshot: u64,
}

/// Shared server state: the model plus the single-writer review state.
pub struct AppState {
    model: Checkpoint,
    config: ServiceConfig,
    inner: RwLock<Inner>,
}

pub type SharedState = Arc<AppState>;

impl AppState {
    /// In-memory service without persistence.
    pub fn in_memory(model: Checkpoint, config: ServiceConfig, state: ServiceState) -> SharedState {
        Arc::new(Self { model, config, inner: RwLock::new(Inner { state, store: None, since_snapshot: 0 }) })
    }

    /// Opens a state directory, restoring any earlier journal.
    pub fn open(dir: &Path, model: Checkpoint, config: ServiceConfig, base: Gallery, images: BTreeMap<u32, HsvImage>) -> Result<SharedState, ServiceError> {
        let (store, state) = Store::open(dir, base, images)?;
        Ok(Arc::new(Self { model, config, inner: RwLock::new(Inner { state, store: Some(store), since_snapshot: 0 }) }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// Copy of the current review state.
    pub async fn state(&self) -> ServiceState {
        self.inner.read().await.state.clone()
    }

    pub async fn gallery_version(&self) -> u64 {
        self.inner.read().await.state.gallery_version
    }

    /// Journals then applies one event under the write lock.
    fn commit(&self, inner: &mut Inner, actor: &str, event: Event) -> Result<(), ServiceError> {
        let record = JournalRecord { seq: inner.state.last_seq + 1, timestamp_ms: now_ms(), actor: actor.to_string(), event };
        let mutates = matches!(record.event, Event::IdentityConfirmed { .. } | Event::IndividualCreated { .. });
        if let Some(store) = inner.store.as_mut() {
            store.append(&record)?;
        }
        inner.state.apply(&record)?;
        if mutates {
            inner.since_snapshot += 1;
            if self.config.snapshot_every > 0 && inner.since_snapshot >= self.config.snapshot_every {
                if let Some(store) = inner.store.as_ref() {
                    store.write_snapshot(&inner.state)?;
                }
                inner.since_snapshot = 0;
            }
        }
        Ok(())
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Deserialize)]
struct IngestRequest {
    obs_id: Option<u32>,
    side: Option<Side>,
    #[serde(default)]
    capture_day: u32,
    image: HsvImage,
    actor: Option<String>,
}

#[derive(Debug, Serialize)]
struct IngestResponse {
    obs_id: u32,
    task_id: u64,
    gallery_version: u64,
}

#[derive(Serialize)]
struct CandidateView {
    rank: usize,
    obs_id: u32,
    individual_id: u32,
    distance: Box<RawValue>,
    thumbnail: String,
}

#[derive(Serialize)]
struct NoveltyView {
    is_new: bool,
    min_distance: Option<Box<RawValue>>,
    threshold: f64,
}

/// Client-facing task: distances are printed with exactly six decimals.
#[derive(Serialize)]
struct TaskView<'a> {
    task_id: u64,
    obs_id: u32,
    side: Side,
    capture_day: u32,
    status: TaskStatus,
    thumbnail: String,
    candidates: Vec<CandidateView>,
    novelty: NoveltyView,
    resolution: &'a Option<Resolution>,
    ranked_at_version: u64,
    gallery_version: u64,
}

fn fixed6(d: f64) -> Box<RawValue> {
    RawValue::from_string(format!("{d:.6}")).expect("decimal literal is valid JSON")
}

fn thumbnail_url(obs_id: u32) -> String {
    format!("/observations/{obs_id}/thumbnail.png")
}

fn task_view(task: &Task, gallery_version: u64) -> TaskView<'_> {
    let Novelty { is_new, min_distance, threshold } = task.novelty;
    TaskView {
        task_id: task.task_id,
        obs_id: task.obs_id,
        side: task.side,
        capture_day: task.capture_day,
        status: task.status,
        thumbnail: thumbnail_url(task.obs_id),
        candidates: task
            .candidates
            .iter()
            .map(|c| CandidateView {
                rank: c.rank,
                obs_id: c.obs_id,
                individual_id: c.individual_id,
                distance: fixed6(c.distance),
                thumbnail: thumbnail_url(c.obs_id),
            })
            .collect(),
        novelty: NoveltyView { is_new, min_distance: min_distance.map(fixed6), threshold },
        resolution: &task.resolution,
        ranked_at_version: task.ranked_at_version,
        gallery_version,
    }
}

fn versioned(version: u64, body: impl IntoResponse) -> Response {
    let mut resp = body.into_response();
    resp.headers_mut().insert(HeaderName::from_static(GALLERY_VERSION_HEADER), HeaderValue::from(version));
    resp
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(e.to_string()))
}

fn embed(model: &Checkpoint, image: &HsvImage, side: Option<Side>) -> Result<(Embedding, Side), ServiceError> {
    let f = featurize(&model.backbone, image)?;
    let side = side.or_else(|| model.direction.as_ref().map(|clf| classify_direction(clf, &f))).unwrap_or(Side::Left);
    Ok((model.head.embed(&f)?, side))
}

async fn ingest(State(app): State<SharedState>, body: Bytes) -> Result<Response, ServiceError> {
    let req: IngestRequest = parse_json(&body)?;
    req.image.validate().map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let (h, w) = app.config.image_size;
    if (req.image.h, req.image.w) != (h, w) {
        return Err(ServiceError::WrongImageSize(format!("expected {h}x{w}, got {}x{}", req.image.h, req.image.w)));
    }
    let worker = app.clone();
    let image = req.image;
    let side = req.side;
    let (embedding, side, image) = tokio::task::spawn_blocking(move || embed(&worker.model, &image, side).map(|(e, s)| (e, s, image)))
        .await
        .map_err(|e| ServiceError::Journal(format!("embedding worker failed: {e}")))??;

    let mut guard = app.inner.write().await;
    let inner = &mut *guard;
    let obs_id = match req.obs_id {
        Some(id) if inner.state.gallery.contains_obs(id) || inner.state.tasks.iter().any(|t| t.obs_id == id) => {
            return Err(ServiceError::BadRequest(format!("obs_id {id} is already in use")));
        }
        Some(id) => id,
        None => inner.state.next_obs_id(),
    };
    let task = inner.state.build_task(obs_id, side, req.capture_day, embedding, app.config.top_k, app.config.threshold)?;
    let task_id = task.task_id;
    let actor = req.actor.unwrap_or_else(|| DEFAULT_ACTOR.to_string());
    app.commit(inner, &actor, Event::TaskCreated { task, image })?;
    let v = inner.state.gallery_version;
    Ok(versioned(v, (axum::http::StatusCode::CREATED, Json(IngestResponse { obs_id, task_id, gallery_version: v }))))
}

#[derive(Debug, Deserialize)]
struct TaskFilter {
    status: Option<TaskStatus>,
}

async fn list_tasks(State(app): State<SharedState>, Query(filter): Query<TaskFilter>) -> Response {
    let inner = app.inner.read().await;
    let v = inner.state.gallery_version;
    let tasks: Vec<TaskView> = inner.state.tasks.iter().filter(|t| filter.status.is_none_or(|s| t.status == s)).map(|t| task_view(t, v)).collect();
    versioned(v, Json(serde_json::json!({ "gallery_version": v, "tasks": tasks })))
}

fn parse_task_id(raw: &str) -> Result<u64, ServiceError> {
    raw.parse().map_err(|_| ServiceError::BadRequest(format!("task id must be an unsigned integer, got {raw:?}")))
}

async fn get_task(State(app): State<SharedState>, UrlPath(raw): UrlPath<String>) -> Result<Response, ServiceError> {
    let id = parse_task_id(&raw)?;
    let inner = app.inner.read().await;
    let v = inner.state.gallery_version;
    let task = inner.state.task(id).ok_or(ServiceError::TaskNotFound(id))?;
    Ok(versioned(v, Json(task_view(task, v))))
}

async fn decide(State(app): State<SharedState>, UrlPath(raw): UrlPath<String>, body: Bytes) -> Result<Response, ServiceError> {
    let id = parse_task_id(&raw)?;
    let mut guard = app.inner.write().await;
    let inner = &mut *guard;
    inner.state.task(id).ok_or(ServiceError::TaskNotFound(id))?;
    let value: serde_json::Value = parse_json(&body)?;
    let actor = match value.get("actor") {
        None | Some(serde_json::Value::Null) => DEFAULT_ACTOR.to_string(),
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(_) => return Err(ServiceError::BadRequest("actor must be a string".into())),
    };
    let decision = serde_json::from_value(value).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let event = inner.state.plan_decision(id, &decision)?;
    app.commit(inner, &actor, event)?;
    let v = inner.state.gallery_version;
    let task = inner.state.task(id).expect("task exists");
    Ok(versioned(v, Json(task_view(task, v))))
}

async fn metrics(State(app): State<SharedState>) -> Response {
    let m: Metrics = app.inner.read().await.state.metrics();
    versioned(m.gallery_version, Json(m))
}

async fn healthz(State(app): State<SharedState>) -> Response {
    let v = app.gallery_version().await;
    versioned(v, Json(serde_json::json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION"), "gallery_version": v })))
}

async fn thumbnail(State(app): State<SharedState>, UrlPath(raw): UrlPath<String>) -> Result<Response, ServiceError> {
    let obs_id: u32 = raw.parse().map_err(|_| ServiceError::BadRequest(format!("obs_id must be an unsigned integer, got {raw:?}")))?;
    let (image, v) = {
        let inner = app.inner.read().await;
        (inner.state.images.get(&obs_id).cloned(), inner.state.gallery_version)
    };
    let image = image.ok_or(ServiceError::ObservationNotFound(obs_id))?;
    let png = encode_png(&image)?;
    Ok(versioned(v, ([(CONTENT_TYPE, "image/png")], png)))
}

/// Stamps the current gallery version on responses that lack it, e.g. errors.
async fn stamp_version(State(app): State<SharedState>, req: Request, next: Next) -> Response {
    let mut resp = next.run(req).await;
    if !resp.headers().contains_key(GALLERY_VERSION_HEADER) {
        let v = app.gallery_version().await;
        resp.headers_mut().insert(HeaderName::from_static(GALLERY_VERSION_HEADER), HeaderValue::from(v));
    }
    resp
}

fn cors(origin: Option<&str>) -> Result<CorsLayer, ServiceError> {
    let allow = match origin {
        None | Some("*") => AllowOrigin::any(),
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).map_err(|_| ServiceError::BadRequest(format!("invalid CORS origin {o:?}")))?),
    };
    Ok(CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
        .allow_headers([CONTENT_TYPE])
        .expose_headers([HeaderName::from_static(GALLERY_VERSION_HEADER)]))
}

pub fn router(app: SharedState) -> Result<Router, ServiceError> {
    let cors = cors(app.config.cors_origin.as_deref())?;
    Ok(Router::new()
        .route("/observations", post(ingest))
        .route("/observations/{obs_id}/thumbnail.png", get(thumbnail))
        .route("/tasks", get(list_tasks))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/decision", post(decide))
        .route("/metrics", get(metrics))
        .route("/healthz", get(healthz))
        .layer(middleware::from_fn_with_state(app.clone(), stamp_version))
        .layer(cors)
        .with_state(app))
}

/// Serves until the listener fails or ctrl-c is received.
pub async fn serve(listener: tokio::net::TcpListener, app: SharedState) -> Result<(), ServiceError> {
    let router = router(app)?;
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
