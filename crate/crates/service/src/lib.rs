//! HTTP API for interactive annotation.
//!
//! Endpoints (JSON unless noted, errors as `{"error": "..."}`):
//!
//! - `GET /healthz`
//! - `GET /cases`: every `f32` sidecar volume in the data directory
//! - `GET /cases/{id}/slice?axis=x|y|z&index=k`: raw 8-bit bytes windowed by the
//!   volume's global min/max; shape and window in `x-slice-*` / `x-window-*` headers
//! - `POST /cases/{id}/points`: `{"points": {"x_min": [x,y,z], ...}}`, any subset of slots
//! - `POST /cases/{id}/segment?mode=init|full`: starts a job, `202` with its id
//! - `GET /cases/{id}/result`: latest job, with the overlay as per-`z` runs
//!
//! Sessions are kept in `<data>/.sessions/<id>.json` and reloaded on demand.

pub mod imaging;
pub mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use extremeseg::pipeline::{run, Case, PipelineConfig};
use extremeseg::volume::{load_mask, load_volume, read_header, Dtype, Volume};

use imaging::{encode_runs, slice_bytes, slice_shape, Axis, Window};
use session::{JobResult, JobState, Mode, PartialPoints, Session, SLOT_NAMES};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Inner {
    data_dir: PathBuf,
    config: PipelineConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    volumes: Mutex<HashMap<String, Arc<Volume>>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(data_dir: impl Into<PathBuf>, config: PipelineConfig) -> Self {
        AppState(Arc::new(Inner {
            data_dir: data_dir.into(),
            config,
            sessions: Mutex::new(HashMap::new()),
            volumes: Mutex::new(HashMap::new()),
        }))
    }

    fn case_header_path(&self, id: &str) -> ApiResult<PathBuf> {
        let valid = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        let path = self.0.data_dir.join(id);
        if valid && is_volume(&path) {
            Ok(path)
        } else {
            Err(ApiError::not_found(format!("no case {id:?}")))
        }
    }

    fn volume(&self, id: &str) -> ApiResult<Arc<Volume>> {
        let path = self.case_header_path(id)?;
        if let Some(v) = self.0.volumes.lock().unwrap().get(id) {
            return Ok(v.clone());
        }
        let v = Arc::new(
            load_volume(&path).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?,
        );
        self.0.volumes.lock().unwrap().insert(id.to_string(), v.clone());
        Ok(v)
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.case_header_path(id)?;
        let mut all = self.0.sessions.lock().unwrap();
        Ok(all
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(Mutex::new(Session::load(&self.0.data_dir, id))))
            .clone())
    }

    fn persist(&self, id: &str, s: &Session) {
        if let Err(e) = s.store(&self.0.data_dir, id) {
            log::error!("could not store session {id}: {e}");
        }
    }
}

/// A case is any sidecar pair whose header declares `f32` data.
fn is_volume(base: &Path) -> bool {
    read_header(base).is_ok_and(|h| h.dtype == Dtype::F32)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/cases", get(list_cases))
        .route("/cases/{id}/slice", get(get_slice))
        .route("/cases/{id}/points", post(post_points))
        .route("/cases/{id}/segment", post(post_segment))
        .route("/cases/{id}/result", get(get_result))
        .fallback(|| async { ApiError::not_found("no such route") })
        .with_state(state)
}

pub async fn serve(data_dir: PathBuf, port: u16, config: PipelineConfig) -> std::io::Result<()> {
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving {} on http://{}", data_dir.display(), listener.local_addr()?);
    axum::serve(listener, router(AppState::new(data_dir, config))).await
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Serialize)]
struct CaseDescriptor {
    id: String,
    dims: [usize; 3],
    spacing: [f64; 3],
}

async fn list_cases(State(state): State<AppState>) -> ApiResult<Json<Vec<CaseDescriptor>>> {
    let dir = &state.0.data_dir;
    let entries = std::fs::read_dir(dir)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", dir.display())))?;
    let mut cases = Vec::new();
    for entry in entries.flatten() {
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Ok(h) = read_header(&path) {
            if h.dtype == Dtype::F32 {
                cases.push(CaseDescriptor {
                    id: id.to_string(),
                    dims: h.dims,
                    spacing: h.spacing_mm,
                });
            }
        }
    }
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Json(cases))
}

#[derive(Deserialize)]
struct SliceQuery {
    axis: Axis,
    index: usize,
}

async fn get_slice(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    query: Result<Query<SliceQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = query.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let v = state.volume(&id)?;
    let window = Window::of(&v);
    let bytes = slice_bytes(&v, q.axis, q.index, &window).ok_or_else(|| {
        ApiError::not_found(format!(
            "index {} out of range for axis of size {}",
            q.index,
            v.dims()[q.axis.index()]
        ))
    })?;
    let (w, h) = slice_shape(v.dims(), q.axis);
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
    for (name, value) in [
        ("x-slice-width", w.to_string()),
        ("x-slice-height", h.to_string()),
        ("x-window-min", window.min.to_string()),
        ("x-window-max", window.max.to_string()),
    ] {
        headers.insert(name, HeaderValue::from_str(&value).unwrap());
    }
    Ok((headers, bytes).into_response())
}

#[derive(Deserialize)]
struct PointsBody {
    points: PartialPoints,
}

#[derive(Serialize)]
struct PointsState {
    case: String,
    state: &'static str,
    count: usize,
    missing: Vec<&'static str>,
}

async fn post_points(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<PointsState>> {
    let v = state.volume(&id)?;
    let PointsBody { points } = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid points body: {e}")))?;
    let dims = v.dims();
    for (name, slot) in SLOT_NAMES.iter().zip(points.slots()) {
        if let Some(p) = slot {
            if (0..3).any(|a| p[a] >= dims[a]) {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!("{name} {p:?} lies outside dims {dims:?}"),
                ));
            }
        }
    }
    if let Some(full) = points.complete() {
        full.validate(dims)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    }
    let slot = state.session(&id)?;
    let mut s = slot.lock().unwrap();
    s.points = points;
    state.persist(&id, &s);
    Ok(Json(PointsState {
        case: id,
        state: if points.complete().is_some() { "ready" } else { "incomplete" },
        count: points.count(),
        missing: points.missing(),
    }))
}

#[derive(Deserialize)]
struct SegmentQuery {
    mode: Mode,
}

async fn post_segment(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    query: Result<Query<SegmentQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let Query(q) = query.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let volume = state.volume(&id)?;
    let slot = state.session(&id)?;
    let (job, points) = {
        let mut s = slot.lock().unwrap();
        if s.running() {
            return Err(ApiError::new(StatusCode::CONFLICT, format!("a job is already running for {id}")));
        }
        let Some(points) = s.points.complete() else {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("points incomplete, missing {}", s.points.missing().join(", ")),
            ));
        };
        s.jobs_started += 1;
        let job = s.jobs_started;
        s.result = Some(JobResult {
            job,
            mode: q.mode,
            state: JobState::Running,
            error: None,
            dims: volume.dims(),
            foreground_voxels: 0,
            overlay: Vec::new(),
            rounds: Vec::new(),
            mean_dice_prev: None,
        });
        state.persist(&id, &s);
        (job, points)
    };

    let worker_state = state.clone();
    let case_id = id.clone();
    tokio::task::spawn_blocking(move || {
        let outcome = segment(&worker_state, &case_id, &volume, points, q.mode);
        let mut s = slot.lock().unwrap();
        let Some(r) = s.result.as_mut().filter(|r| r.job == job) else {
            return;
        };
        match outcome {
            Ok(done) => *r = JobResult { job, ..done },
            Err(e) => {
                log::warn!("job {job} on {case_id} failed: {e}");
                r.state = JobState::Failed;
                r.error = Some(e);
            }
        }
        worker_state.persist(&case_id, &s);
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "case": id, "job": job, "mode": q.mode, "state": JobState::Running })),
    ))
}

fn segment(
    state: &AppState,
    id: &str,
    volume: &Volume,
    points: extremeseg::points::ExtremePointSet,
    mode: Mode,
) -> Result<JobResult, String> {
    let mut cfg = state.0.config;
    if mode == Mode::Init {
        cfg.max_rounds = 1;
    }
    // A ground-truth mask next to the case only feeds the logged Dice.
    let gt = load_mask(&state.0.data_dir.join(format!("{id}_gt")))
        .ok()
        .filter(|m| m.dims() == volume.dims());
    let case = Case {
        volume: volume.clone(),
        points,
        gt,
    };
    let out = run(std::slice::from_ref(&case), &cfg).map_err(|e| e.to_string())?;
    let mask = &out.masks[0];
    Ok(JobResult {
        job: 0,
        mode,
        state: JobState::Done,
        error: None,
        dims: mask.dims(),
        foreground_voxels: mask.count(),
        overlay: encode_runs(mask),
        mean_dice_prev: out.rounds.last().and_then(|r| r.mean_dice_prev),
        rounds: out.rounds,
    })
}

async fn get_result(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JobResult>> {
    let slot = state.session(&id)?;
    let s = slot.lock().unwrap();
    s.result
        .clone()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("no segmentation has been run for {id}")))
}
