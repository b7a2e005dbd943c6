//! REST service for reviewing segments, labeling actions and vetting generated questions.
//!
//! Writes are single-writer and fsynced before the response; reads work on immutable snapshots.

pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tad_core::geom::{self, Vec3};
use tad_core::motion::{classify_motion, Thresholds};
use tad_core::qa::{GroundTruth, QaItem};
use tad_core::segment::{partition_scene, segment_ego_poses, suggest_track_label, Segment, SegmentationParams};
use tad_core::{ActionLabel, SceneBundle};
use thiserror::Error;
use tokio::sync::oneshot;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

pub use store::{
    reviewed_items, LabelKey, LabelRecord, LabelSource, LabelWrite, ReviewRecord, Snapshot, Store, StoreError, Verdict,
    EGO_TARGET,
};

/// Header carrying the shared write token when one is configured.
pub const TOKEN_HEADER: &str = "x-annotation-token";

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("scene {scene}: {message}")]
    Scene { scene: String, message: String },
    #[error("duplicate scene id {0}")]
    DuplicateScene(String),
    #[error("cannot bind {addr}: {message}")]
    Bind { addr: String, message: String },
    #[error("io error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone)]
pub struct AnnotateConfig {
    pub store_dir: PathBuf,
    pub bundles: Vec<SceneBundle>,
    pub qa_items: Vec<QaItem>,
    /// Served under `/media/`; frame image paths resolve against it.
    pub media_root: Option<PathBuf>,
    /// Static front-end assets served at `/`.
    pub ui_root: Option<PathBuf>,
    pub token: Option<String>,
    pub segmentation: SegmentationParams,
    pub thresholds: Thresholds,
}

impl AnnotateConfig {
    pub fn new(store_dir: PathBuf, bundles: Vec<SceneBundle>) -> Self {
        Self {
            store_dir,
            bundles,
            qa_items: Vec::new(),
            media_root: None,
            ui_root: None,
            token: None,
            segmentation: SegmentationParams::default(),
            thresholds: Thresholds::default(),
        }
    }
}

/// Every `*.json` scene bundle in `dir`, sorted by file name.
pub fn load_bundles_dir(dir: &Path) -> Result<Vec<SceneBundle>, AnnotateError> {
    let io = |e: std::io::Error| AnnotateError::Io { path: dir.to_path_buf(), message: e.to_string() };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| SceneBundle::load(p).map_err(|e| AnnotateError::Io { path: p.clone(), message: e.to_string() }))
        .collect()
}

struct SceneEntry {
    bundle: SceneBundle,
    segments: Vec<Segment>,
}

pub struct AppState {
    scenes: BTreeMap<String, SceneEntry>,
    qa: Vec<QaItem>,
    qa_index: HashMap<String, usize>,
    store: Store,
    token: Option<String>,
    thresholds: Thresholds,
}

impl AppState {
    pub fn new(cfg: &AnnotateConfig) -> Result<Self, AnnotateError> {
        let mut scenes = BTreeMap::new();
        for b in &cfg.bundles {
            let segments = partition_scene(b, &cfg.segmentation)
                .map_err(|e| AnnotateError::Scene { scene: b.scene_id.clone(), message: e.to_string() })?;
            if scenes.insert(b.scene_id.clone(), SceneEntry { bundle: b.clone(), segments }).is_some() {
                return Err(AnnotateError::DuplicateScene(b.scene_id.clone()));
            }
        }
        let qa_index = cfg.qa_items.iter().enumerate().map(|(i, q)| (q.id.clone(), i)).collect();
        Ok(Self {
            scenes,
            qa: cfg.qa_items.clone(),
            qa_index,
            store: Store::open(&cfg.store_dir)?,
            token: cfg.token.clone(),
            thresholds: cfg.thresholds,
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }
}

#[derive(Debug)]
enum ApiError {
    NotFound(String),
    Invalid { field: String, reason: String },
    Conflict { current_revision: u64, current: Option<Box<LabelRecord>> },
    Unauthorized,
    Internal(String),
}

impl ApiError {
    fn invalid(field: &str, reason: impl Into<String>) -> Self {
        ApiError::Invalid { field: field.to_string(), reason: reason.into() }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Conflict { current, record, .. } => ApiError::Conflict { current_revision: current, current: record },
            StoreError::Invalid { field, reason } => ApiError::invalid(field, reason),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, json!({"error": "not_found", "message": m})),
            ApiError::Invalid { field, reason } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({"error": "invalid_field", "field": field, "message": format!("{field}: {reason}")}),
            ),
            ApiError::Conflict { current_revision, current } => (
                StatusCode::CONFLICT,
                json!({"error": "stale_revision", "current_revision": current_revision, "current": current}),
            ),
            ApiError::Unauthorized => (StatusCode::UNAUTHORIZED, json!({"error": "unauthorized", "message": "missing or wrong token"})),
            ApiError::Internal(m) => {
                log::error!("{m}");
                (StatusCode::INTERNAL_SERVER_ERROR, json!({"error": "internal", "message": m}))
            }
        };
        (status, Json(body)).into_response()
    }
}

type Shared = Arc<AppState>;

fn check_token(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    match &state.token {
        Some(t) if headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok()) != Some(t.as_str()) => Err(ApiError::Unauthorized),
        _ => Ok(()),
    }
}

fn scene<'a>(state: &'a AppState, id: &str) -> Result<&'a SceneEntry, ApiError> {
    state.scenes.get(id).ok_or_else(|| ApiError::NotFound(format!("scene {id}")))
}

#[derive(Serialize)]
struct SceneSummary {
    scene_id: String,
    num_frames: usize,
    num_segments: usize,
    labels: usize,
    qa_items: usize,
}

async fn list_scenes(State(state): State<Shared>) -> Json<Vec<SceneSummary>> {
    let snap = state.store.snapshot();
    Json(
        state
            .scenes
            .values()
            .map(|s| SceneSummary {
                scene_id: s.bundle.scene_id.clone(),
                num_frames: s.bundle.num_frames(),
                num_segments: s.segments.len(),
                labels: snap.scene_labels(&s.bundle.scene_id).count(),
                qa_items: state.qa.iter().filter(|q| q.scene_id == s.bundle.scene_id).count(),
            })
            .collect(),
    )
}

/// Planar coordinates relative to `origin`, x forward and y left.
fn to_bev(origin: &tad_core::EgoPose, p: Vec3) -> [f64; 2] {
    let local = origin.rotation.inverse_rotate(geom::sub(p, origin.translation));
    [local[0], local[1]]
}

#[derive(Serialize)]
struct Suggestion {
    label: Option<ActionLabel>,
    source: LabelSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

async fn get_segment(State(state): State<Shared>, UrlPath((id, k)): UrlPath<(String, usize)>) -> Result<Json<Value>, ApiError> {
    let entry = scene(&state, &id)?;
    let seg = entry
        .segments
        .iter()
        .find(|s| s.segment_index == k)
        .ok_or_else(|| ApiError::NotFound(format!("segment {k} of scene {id}")))?;
    let b = &entry.bundle;
    let origin = &b.ego_poses[seg.first_frame() as usize];
    let frames: Vec<Value> = seg
        .frame_indices
        .iter()
        .filter_map(|&f| b.frames.get(f as usize))
        .map(|f| json!({"idx": f.idx, "t": f.t, "image_url": f.image.as_ref().map(|p| format!("/media/{p}"))}))
        .collect();
    let ego_bev: Vec<[f64; 2]> = segment_ego_poses(b, seg).iter().map(|p| to_bev(origin, p.translation)).collect();

    let mut tracks = Vec::new();
    let mut suggestions: BTreeMap<String, Suggestion> = BTreeMap::new();
    suggestions.insert(
        EGO_TARGET.to_string(),
        match classify_motion(segment_ego_poses(b, seg), &state.thresholds) {
            Ok(l) => Suggestion { label: Some(l), source: LabelSource::Suggested, note: None },
            Err(e) => Suggestion { label: None, source: LabelSource::Suggested, note: Some(e.to_string()) },
        },
    );
    for tid in &seg.tracks_in_range {
        let Some(track) = b.track(tid) else { continue };
        let bev: Vec<[f64; 2]> = track.states.iter().filter(|s| seg.contains(s.frame_index)).map(|s| to_bev(origin, s.center)).collect();
        tracks.push(json!({"track_id": tid, "category": track.category, "bev": bev}));
        let suggestion = match seg.auto_labels.get(tid) {
            Some(l) => Suggestion { label: Some(*l), source: LabelSource::Auto, note: None },
            None => match suggest_track_label(b, seg, tid, &state.thresholds) {
                Ok(l) => Suggestion { label: Some(l), source: LabelSource::Suggested, note: None },
                Err(e) => Suggestion { label: None, source: LabelSource::Suggested, note: Some(e.to_string()) },
            },
        };
        suggestions.insert(tid.clone(), suggestion);
    }
    let snap = state.store.snapshot();
    let labels: BTreeMap<&str, &LabelRecord> =
        snap.scene_labels(&id).filter(|r| r.segment_index == k).map(|r| (r.target.as_str(), r)).collect();
    Ok(Json(json!({
        "scene_id": id,
        "segment_index": k,
        "frames": frames,
        "bev": {"ego": ego_bev, "tracks": tracks},
        "suggestions": suggestions,
        "labels": labels,
    })))
}

#[derive(Deserialize)]
struct LabelsQuery {
    scene: Option<String>,
    #[serde(default)]
    format: Option<String>,
}

async fn get_labels(State(state): State<Shared>, Query(q): Query<LabelsQuery>) -> Result<Json<Value>, ApiError> {
    let snap = state.store.snapshot();
    match (q.format.as_deref(), q.scene) {
        (Some("export"), Some(id)) => {
            let entry = scene(&state, &id)?;
            Ok(Json(serde_json::to_value(snap.export_scene(&id, &entry.segments)).expect("export serializes")))
        }
        (Some("export"), None) => Err(ApiError::invalid("scene", "export needs a scene")),
        (Some("records") | None, scene_filter) => {
            let records: Vec<&LabelRecord> =
                snap.labels.values().filter(|r| scene_filter.as_ref().is_none_or(|s| &r.scene_id == s)).collect();
            Ok(Json(json!({ "records": records })))
        }
        (Some(other), _) => Err(ApiError::invalid("format", format!("unknown format {other:?} (records|export)"))),
    }
}

fn str_field<'a>(body: &'a Value, field: &str) -> Result<&'a str, ApiError> {
    match body.get(field) {
        Some(Value::String(s)) if !s.is_empty() => Ok(s),
        Some(_) => Err(ApiError::invalid(field, "must be a non-empty string")),
        None => Err(ApiError::invalid(field, "missing")),
    }
}

fn uint_field(body: &Value, field: &str, default: Option<u64>) -> Result<u64, ApiError> {
    match body.get(field) {
        Some(v) => v.as_u64().ok_or_else(|| ApiError::invalid(field, "must be a non-negative integer")),
        None => default.ok_or_else(|| ApiError::invalid(field, "missing")),
    }
}

fn parse_label_write(state: &AppState, body: &Value) -> Result<LabelWrite, ApiError> {
    if !body.is_object() {
        return Err(ApiError::invalid("body", "expected a JSON object"));
    }
    let scene_id = str_field(body, "scene_id")?;
    let entry = state.scenes.get(scene_id).ok_or_else(|| ApiError::invalid("scene_id", format!("unknown scene {scene_id}")))?;
    let segment_index = uint_field(body, "segment_index", None)? as usize;
    if segment_index >= entry.segments.len() {
        return Err(ApiError::invalid("segment_index", format!("scene has {} segments", entry.segments.len())));
    }
    let target = str_field(body, "target")?;
    if target != EGO_TARGET && entry.bundle.track(target).is_none() {
        return Err(ApiError::invalid("target", format!("{target:?} is neither \"ego\" nor a track of the scene")));
    }
    let label_text = str_field(body, "label")?;
    let label = ActionLabel::from_phrase(label_text)
        .ok_or_else(|| ApiError::invalid("label", format!("{label_text:?} is not one of the eight action phrases")))?;
    let source = match body.get("source") {
        None => LabelSource::Human,
        Some(v) => serde_json::from_value(v.clone()).map_err(|_| ApiError::invalid("source", "expected auto|suggested|human"))?,
    };
    let annotator = str_field(body, "annotator")?.to_string();
    let base_revision = uint_field(body, "base_revision", Some(0))?;
    Ok(LabelWrite {
        key: LabelKey { scene_id: scene_id.to_string(), segment_index, target: target.to_string() },
        label,
        source,
        base_revision,
        annotator,
    })
}

async fn put_label(State(state): State<Shared>, headers: HeaderMap, body: Json<Value>) -> Result<Json<LabelRecord>, ApiError> {
    check_token(&state, &headers)?;
    let write = parse_label_write(&state, &body)?;
    Ok(Json(state.store.put_label(write).await?))
}

#[derive(Deserialize)]
struct QaQuery {
    scene: Option<String>,
    /// With `true`, rejected items are dropped and edits applied.
    #[serde(default)]
    reviewed: bool,
}

async fn get_qa(State(state): State<Shared>, Query(q): Query<QaQuery>) -> Result<Json<Value>, ApiError> {
    if let Some(s) = &q.scene {
        scene(&state, s)?;
    }
    let snap = state.store.snapshot();
    let items: Vec<QaItem> =
        state.qa.iter().filter(|i| q.scene.as_ref().is_none_or(|s| &i.scene_id == s)).cloned().collect();
    if q.reviewed {
        return Ok(Json(json!({ "items": reviewed_items(&items, &snap.reviews) })));
    }
    let rows: Vec<Value> = items.iter().map(|i| json!({"item": i, "review": snap.reviews.get(&i.id)})).collect();
    Ok(Json(json!({ "items": rows })))
}

async fn put_review(State(state): State<Shared>, headers: HeaderMap, body: Json<Value>) -> Result<Json<ReviewRecord>, ApiError> {
    check_token(&state, &headers)?;
    let body = &body.0;
    let qa_id = str_field(body, "qa_id")?;
    let item = state
        .qa_index
        .get(qa_id)
        .map(|&i| &state.qa[i])
        .ok_or_else(|| ApiError::invalid("qa_id", format!("unknown item {qa_id}")))?;
    let verdict: Verdict = serde_json::from_value(body.get("verdict").cloned().unwrap_or(Value::Null))
        .map_err(|_| ApiError::invalid("verdict", "expected accepted|rejected|edited"))?;
    let edited_answer = match (verdict, body.get("edited_answer")) {
        (Verdict::Edited, Some(v)) => {
            let gt: GroundTruth =
                serde_json::from_value(v.clone()).map_err(|_| ApiError::invalid("edited_answer", "expected a string or a frame list"))?;
            store::validate_edit(item, &gt)?;
            Some(gt)
        }
        (Verdict::Edited, None) => return Err(ApiError::invalid("edited_answer", "required when verdict is edited")),
        (_, Some(_)) => return Err(ApiError::invalid("edited_answer", "only allowed when verdict is edited")),
        (_, None) => None,
    };
    let review = ReviewRecord {
        qa_id: qa_id.to_string(),
        verdict,
        edited_answer,
        annotator: str_field(body, "annotator")?.to_string(),
        timestamp: 0.0,
    };
    Ok(Json(state.store.put_review(review).await?))
}

/// Full application router.
pub fn router(state: Shared, media_root: Option<&Path>, ui_root: Option<&Path>) -> Router {
    let mut app = Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/scenes", get(list_scenes))
        .route("/scenes/{id}/segments/{k}", get(get_segment))
        .route("/labels", get(get_labels).put(put_label))
        .route("/qa", get(get_qa))
        .route("/reviews", axum::routing::put(put_review))
        .with_state(state);
    if let Some(media) = media_root {
        app = app.nest_service("/media", ServeDir::new(media));
    }
    if let Some(ui) = ui_root {
        app = app.fallback_service(ServeDir::new(ui));
    }
    app.layer(CorsLayer::permissive())
}

/// A running service bound to a local port.
pub struct AnnotationServer {
    pub addr: SocketAddr,
    pub state: Shared,
    shutdown: Mutex<Option<oneshot::Sender<()>>>,
    task: tokio::sync::Mutex<Option<tokio::task::JoinHandle<()>>>,
}

impl AnnotationServer {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting connections and waits for in-flight requests.
    pub async fn shutdown(&self) {
        if let Some(tx) = self.shutdown.lock().expect("shutdown lock").take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.lock().await.take() {
            let _ = task.await;
        }
    }

    /// Blocks until the server exits.
    pub async fn wait(&self) {
        if let Some(task) = self.task.lock().await.take() {
            let _ = task.await;
        }
    }
}

pub async fn serve(cfg: AnnotateConfig, host: &str, port: u16) -> Result<AnnotationServer, AnnotateError> {
    let state = Arc::new(AppState::new(&cfg)?);
    let listener = tokio::net::TcpListener::bind((host, port))
        .await
        .map_err(|e| AnnotateError::Bind { addr: format!("{host}:{port}"), message: e.to_string() })?;
    let addr = listener.local_addr().map_err(|e| AnnotateError::Bind { addr: format!("{host}:{port}"), message: e.to_string() })?;
    let app = router(state.clone(), cfg.media_root.as_deref(), cfg.ui_root.as_deref());
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let served = axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = rx.await;
        });
        if let Err(e) = served.await {
            log::error!("annotation server stopped: {e}");
        }
    });
    Ok(AnnotationServer { addr, state, shutdown: Mutex::new(Some(tx)), task: tokio::sync::Mutex::new(Some(task)) })
}
