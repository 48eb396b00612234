//! Foveation grid service.
//!
//! An upload is foveated at every cell centre of a `grid_n x grid_n` grid;
//! clients poll the job and then fetch tiles, which are immutable and
//! addressed by content hash.
//!
//! ```text
//! POST /api/v1/foveate?backend=&grid_n=&fovea_radius=   multipart field "image"
//! GET  /api/v1/jobs/{job_id}
//! GET  /api/v1/jobs/{job_id}/tile/{gx}/{gy}
//! ```

pub mod grid;
pub mod store;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use periph_core::evalharness::{BlurBackend, Foveator};
use periph_core::fgn::{self, FgnParams};
use periph_core::imagekit::{decode_png, encode_png, png_dimensions, Image};
use periph_core::radialblur::DEFAULT_SIGMA_MAX;
use serde::Serialize;
use tokio::sync::Semaphore;
use tower_http::trace::TraceLayer;
use uuid::Uuid;

use grid::{default_fovea_radius, grid_fixation, DEFAULT_GRID_N, MAX_GRID_N};
use store::{Backend, JobKey, JobManifest, JobStatus, Store, TileRecord};

pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 16 * 1024 * 1024;
pub const DEFAULT_MAX_DIMENSION: usize = 2048;
/// Multipart framing allowance on top of the file size limit.
const MULTIPART_SLACK: usize = 64 * 1024;

#[derive(Debug, Clone)]
pub struct Config {
    pub storage_dir: PathBuf,
    pub workers: usize,
    pub checkpoint: Option<PathBuf>,
    pub max_upload_bytes: usize,
    pub max_dimension: usize,
    pub blur_sigma_max: f64,
    /// Sigma step of the layered blur; `None` runs the per-pixel reference.
    pub blur_layer_step: Option<f64>,
}

impl Config {
    pub fn new(storage_dir: impl Into<PathBuf>) -> Self {
        Self {
            storage_dir: storage_dir.into(),
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            checkpoint: None,
            max_upload_bytes: DEFAULT_MAX_UPLOAD_BYTES,
            max_dimension: DEFAULT_MAX_DIMENSION,
            blur_sigma_max: DEFAULT_SIGMA_MAX,
            blur_layer_step: Some(0.5),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StartupError {
    #[error("storage: {0}")]
    Storage(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] periph_core::Error),
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    config: Config,
    store: Store,
    jobs: Mutex<HashMap<Uuid, JobManifest>>,
    workers: Arc<Semaphore>,
    fgn: Option<Arc<FgnParams<f32>>>,
}

impl AppState {
    /// Opens the store, loads the checkpoint and previously persisted jobs.
    /// Call [`AppState::resume`] from inside the runtime to finish pending ones.
    pub fn open(config: Config) -> Result<Self, StartupError> {
        let store = Store::open(&config.storage_dir)?;
        let fgn = match &config.checkpoint {
            Some(path) => Some(Arc::new(fgn::load_checkpoint(&std::fs::read(path)?)?)),
            None => None,
        };
        let jobs = store
            .load_manifests()?
            .into_iter()
            .map(|m| (m.job_id, m))
            .collect();
        Ok(Self {
            inner: Arc::new(Inner {
                workers: Arc::new(Semaphore::new(config.workers.max(1))),
                config,
                store,
                jobs: Mutex::new(jobs),
                fgn,
            }),
        })
    }

    pub fn config(&self) -> &Config {
        &self.inner.config
    }

    /// Restarts every job that was pending when the store was last written.
    pub fn resume(&self) -> usize {
        let pending: Vec<JobManifest> = self
            .jobs()
            .values()
            .filter(|m| m.status == JobStatus::Pending)
            .cloned()
            .collect();
        let mut resumed = 0;
        for m in pending {
            let source = self
                .inner
                .store
                .read_source(&m.key.source_hash)
                .map_err(|e| e.to_string())
                .and_then(|b| decode_png(&b).map_err(|e| e.to_string()));
            match source {
                Ok(img) => {
                    tracing::info!(job_id = %m.job_id, "resuming job");
                    self.spawn_job(m.job_id, Arc::new(img));
                    resumed += 1;
                }
                Err(e) => self.fail_job(m.job_id, format!("source unavailable: {e}")),
            }
        }
        resumed
    }

    fn jobs(&self) -> std::sync::MutexGuard<'_, HashMap<Uuid, JobManifest>> {
        self.inner.jobs.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn default_backend(&self) -> Backend {
        if self.inner.fgn.is_some() {
            Backend::Fgn
        } else {
            Backend::Blur
        }
    }

    fn foveator(&self, backend: Backend) -> Box<dyn Foveator + Send> {
        match backend {
            Backend::Fgn => Box::new(fgn_backend(self.inner.fgn.clone().expect("checked at upload"))),
            Backend::Blur => Box::new(BlurBackend {
                sigma_max: self.inner.config.blur_sigma_max,
                layer_step: self.inner.config.blur_layer_step,
            }),
        }
    }

    fn spawn_job(&self, id: Uuid, img: Arc<Image<f32>>) {
        let Some(m) = self.jobs().get(&id).cloned() else {
            return;
        };
        let n = m.key.grid_n;
        for (idx, tile) in m.tiles.iter().enumerate() {
            if tile.is_some() {
                continue;
            }
            let state = self.clone();
            let img = Arc::clone(&img);
            let key = m.key.clone();
            tokio::spawn(async move {
                let Ok(_permit) = state.inner.workers.clone().acquire_owned().await else {
                    return;
                };
                if state.jobs().get(&id).map(|m| m.status) != Some(JobStatus::Pending) {
                    return;
                }
                let (gx, gy) = (idx % n, idx / n);
                let worker = state.clone();
                let result = tokio::task::spawn_blocking(move || worker.compute_tile(&img, &key, gx, gy)).await;
                match result {
                    Ok(Ok(tile)) => state.record_tile(id, idx, tile),
                    Ok(Err(e)) => state.fail_job(id, e),
                    Err(e) => state.fail_job(id, format!("worker panicked: {e}")),
                }
            });
        }
    }

    fn compute_tile(&self, img: &Image<f32>, key: &JobKey, gx: usize, gy: usize) -> Result<TileRecord, String> {
        let fix = grid_fixation(gx, gy, key.grid_n, img.height(), img.width(), key.fovea_radius);
        let out = self.foveator(key.backend).foveate(img, &fix).map_err(|e| e.to_string())?;
        let png = encode_png(&out).map_err(|e| e.to_string())?;
        let hash = self.inner.store.put_tile(&png).map_err(|e| e.to_string())?;
        Ok(TileRecord {
            gx,
            gy,
            fx: fix.fx,
            fy: fix.fy,
            hash,
        })
    }

    fn record_tile(&self, id: Uuid, idx: usize, tile: TileRecord) {
        let finished = {
            let mut jobs = self.jobs();
            let Some(m) = jobs.get_mut(&id) else {
                return;
            };
            if m.status != JobStatus::Pending {
                return;
            }
            m.tiles[idx] = Some(tile);
            if m.completed() == m.total() {
                m.status = JobStatus::Done;
                Some(m.clone())
            } else {
                None
            }
        };
        if let Some(m) = finished {
            tracing::info!(job_id = %id, tiles = m.total(), "job done");
            if let Err(e) = self.inner.store.save_manifest(&m) {
                tracing::error!(job_id = %id, error = %e, "persisting manifest");
            }
        }
    }

    fn fail_job(&self, id: Uuid, error: String) {
        let m = {
            let mut jobs = self.jobs();
            let Some(m) = jobs.get_mut(&id) else {
                return;
            };
            if m.status != JobStatus::Pending {
                return;
            }
            m.status = JobStatus::Error;
            m.error = Some(error.clone());
            m.clone()
        };
        tracing::error!(job_id = %id, %error, "job failed");
        if let Err(e) = self.inner.store.save_manifest(&m) {
            tracing::error!(job_id = %id, error = %e, "persisting manifest");
        }
    }
}

fn fgn_backend(params: Arc<FgnParams<f32>>) -> impl Foveator + Send {
    struct Shared(Arc<FgnParams<f32>>);
    impl Foveator for Shared {
        fn name(&self) -> String {
            "fgn".into()
        }
        fn foveate(&self, img: &Image<f32>, fix: &periph_core::Fixation) -> periph_core::Result<Image<f32>> {
            fgn::foveate(&self.0, img, fix)
        }
    }
    Shared(params)
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
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Serialize)]
pub struct JobDescriptor {
    pub job_id: Uuid,
    pub grid_n: usize,
    pub status_url: String,
}

#[derive(Debug, Serialize)]
pub struct JobStatusBody {
    pub job_id: Uuid,
    pub status: JobStatus,
    pub completed_tiles: usize,
    pub total_tiles: usize,
    pub grid_n: usize,
    pub width: usize,
    pub height: usize,
    pub backend: Backend,
    pub fovea_radius: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn router(state: AppState) -> Router {
    let limit = state.config().max_upload_bytes + MULTIPART_SLACK;
    Router::new()
        .route("/api/v1/foveate", post(foveate))
        .route("/api/v1/jobs/{job_id}", get(job_status))
        .route("/api/v1/jobs/{job_id}/tile/{gx}/{gy}", get(tile))
        .route("/healthz", get(|| async { "ok" }))
        .layer(DefaultBodyLimit::max(limit))
        .layer(TraceLayer::new_for_http())
        .with_state(state)
}

struct UploadParams {
    backend: Backend,
    grid_n: usize,
    fovea_radius: Option<f64>,
}

fn unprocessable(msg: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, msg)
}

fn parse_params(state: &AppState, q: &HashMap<String, String>) -> Result<UploadParams, ApiError> {
    if let Some(unknown) = q.keys().find(|k| !["backend", "grid_n", "fovea_radius"].contains(&k.as_str())) {
        return Err(unprocessable(format!("unknown parameter {unknown:?}")));
    }
    let backend = match q.get("backend") {
        None => state.default_backend(),
        Some(b) => Backend::parse(b).ok_or_else(|| unprocessable(format!("backend must be fgn or blur, got {b:?}")))?,
    };
    if backend == Backend::Fgn && state.inner.fgn.is_none() {
        return Err(unprocessable("fgn backend requested but no checkpoint is loaded"));
    }
    let grid_n = match q.get("grid_n") {
        None => DEFAULT_GRID_N,
        Some(s) => s
            .parse::<usize>()
            .ok()
            .filter(|n| (1..=MAX_GRID_N).contains(n))
            .ok_or_else(|| unprocessable(format!("grid_n must be an integer in 1..={MAX_GRID_N}, got {s:?}")))?,
    };
    let fovea_radius = match q.get("fovea_radius") {
        None => None,
        Some(s) => Some(
            s.parse::<f64>()
                .ok()
                .filter(|r| r.is_finite() && *r >= 0.0)
                .ok_or_else(|| unprocessable(format!("fovea_radius must be a non-negative number, got {s:?}")))?,
        ),
    };
    Ok(UploadParams {
        backend,
        grid_n,
        fovea_radius,
    })
}

async fn read_upload(mut multipart: Multipart, max: usize) -> Result<Vec<u8>, ApiError> {
    let multipart_err = |e: axum::extract::multipart::MultipartError| {
        let status = e.status();
        let status = if status == StatusCode::PAYLOAD_TOO_LARGE {
            status
        } else {
            StatusCode::UNSUPPORTED_MEDIA_TYPE
        };
        ApiError::new(status, e.body_text())
    };
    while let Some(field) = multipart.next_field().await.map_err(multipart_err)? {
        let is_image = field.name() == Some("image") || field.file_name().is_some();
        let bytes = field.bytes().await.map_err(multipart_err)?;
        if !is_image {
            continue;
        }
        if bytes.len() > max {
            return Err(ApiError::new(
                StatusCode::PAYLOAD_TOO_LARGE,
                format!("upload of {} bytes exceeds {max}", bytes.len()),
            ));
        }
        return Ok(bytes.to_vec());
    }
    Err(unprocessable("multipart body has no image field"))
}

async fn foveate(
    State(state): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
    multipart: Multipart,
) -> Result<(StatusCode, Json<JobDescriptor>), ApiError> {
    let params = parse_params(&state, &q)?;
    let cfg = state.config();
    let bytes = read_upload(multipart, cfg.max_upload_bytes).await?;
    let (h, w) = png_dimensions(&bytes).map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, e.to_string()))?;
    if h.max(w) > cfg.max_dimension {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("{w}x{h} exceeds the {} pixel limit", cfg.max_dimension),
        ));
    }
    let img = decode_png(&bytes).map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, e.to_string()))?;
    if params.grid_n > h.min(w) {
        return Err(unprocessable(format!("grid_n {} exceeds image size {w}x{h}", params.grid_n)));
    }
    if params.backend == Backend::Fgn {
        let k = state.inner.fgn.as_ref().map_or(1, |p| p.arch.max_kernel());
        if h.min(w) < k {
            return Err(unprocessable(format!("fgn backend needs images of at least {k}x{k}")));
        }
    }
    let key = JobKey {
        source_hash: img.content_hash(),
        backend: params.backend,
        grid_n: params.grid_n,
        fovea_radius: params.fovea_radius.unwrap_or_else(|| default_fovea_radius(w)),
    };
    let id = key.job_id();
    let descriptor = JobDescriptor {
        job_id: id,
        grid_n: key.grid_n,
        status_url: format!("/api/v1/jobs/{id}"),
    };

    // the check and the insert share one critical section: one computation per key
    let created = {
        let mut jobs = state.jobs();
        if jobs.contains_key(&id) {
            None
        } else {
            let m = JobManifest::new(key.clone(), h, w);
            jobs.insert(id, m.clone());
            Some(m)
        }
    };
    if let Some(m) = created {
        let persisted = state
            .inner
            .store
            .put_source(&key.source_hash, &bytes)
            .and_then(|_| state.inner.store.save_manifest(&m));
        if let Err(e) = persisted {
            state.fail_job(id, format!("storage: {e}"));
            return Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()));
        }
        tracing::info!(job_id = %id, backend = key.backend.as_str(), grid_n = key.grid_n, width = w, height = h, "job created");
        state.spawn_job(id, Arc::new(img));
    }
    Ok((StatusCode::ACCEPTED, Json(descriptor)))
}

fn lookup(state: &AppState, job_id: &str) -> Result<JobManifest, ApiError> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("no job {job_id}"));
    let id: Uuid = job_id.parse().map_err(|_| not_found())?;
    state.jobs().get(&id).cloned().ok_or_else(not_found)
}

async fn job_status(State(state): State<AppState>, Path(job_id): Path<String>) -> Result<Json<JobStatusBody>, ApiError> {
    let m = lookup(&state, &job_id)?;
    Ok(Json(JobStatusBody {
        job_id: m.job_id,
        status: m.status,
        completed_tiles: m.completed(),
        total_tiles: m.total(),
        grid_n: m.key.grid_n,
        width: m.width,
        height: m.height,
        backend: m.key.backend,
        fovea_radius: m.key.fovea_radius,
        error: m.error.clone(),
    }))
}

async fn tile(
    State(state): State<AppState>,
    Path((job_id, gx, gy)): Path<(String, String, String)>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let m = lookup(&state, &job_id)?;
    let n = m.key.grid_n;
    let coord = |s: &str| s.parse::<usize>().ok().filter(|&v| v < n);
    let (Some(gx), Some(gy)) = (coord(&gx), coord(&gy)) else {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("tile ({gx}, {gy}) outside the {n}x{n} grid")));
    };
    if m.status != JobStatus::Done {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("job is {:?}", m.status).to_lowercase()));
    }
    let record = m.tiles[grid::tile_index(gx, gy, n)]
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "finished job lacks a tile"))?;
    let etag = format!("\"{}\"", record.hash);
    let cache = "public, max-age=31536000, immutable";
    if headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == etag))
    {
        return Ok((StatusCode::NOT_MODIFIED, [(header::ETAG, etag), (header::CACHE_CONTROL, cache.to_string())]).into_response());
    }
    let bytes = state
        .inner
        .store
        .read_tile(&record.hash)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png".to_string()),
            (header::ETAG, etag),
            (header::CACHE_CONTROL, cache.to_string()),
        ],
        bytes,
    )
        .into_response())
}
