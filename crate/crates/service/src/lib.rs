//! HTTP session service over the editing pipeline. The wire protocol is
//! documented in `docs/API.md`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::Engine;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::Semaphore;

use geoedit_core::backbone::{checkpoint, PixelCodec};
use geoedit_core::geometry::DepthMap;
use geoedit_core::imaging::{blend, ImageBuffer, MaskBuffer};
use geoedit_core::instruction::EditInstruction;
use geoedit_core::pipeline::{EditRequest, Editor, PipelineConfig};
use geoedit_core::Error;

pub mod assist;
pub mod session;

use session::{expired, write_run, Artifact, JobKind, JobStatus, MaskRole, Session};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub port: u16,
    pub data_dir: PathBuf,
    /// Pipeline jobs allowed to run at once.
    pub workers: usize,
    pub checkpoint: PathBuf,
    pub ttl: Duration,
    pub max_upload_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            data_dir: PathBuf::from("geoedit-data"),
            workers: 1,
            checkpoint: checkpoint::default_path(),
            ttl: Duration::from_secs(3600),
            max_upload_bytes: 8 << 20,
        }
    }
}

impl ServiceConfig {
    /// Reads `GEOEDIT_PORT`, `GEOEDIT_DATA_DIR`, `GEOEDIT_WORKERS`,
    /// `GEOEDIT_CHECKPOINT`, `GEOEDIT_SESSION_TTL_SECS` and
    /// `GEOEDIT_MAX_UPLOAD_BYTES` through `lookup`; unset keys keep defaults.
    pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Result<Self, String> {
        fn num<T: std::str::FromStr>(key: &str, v: Option<String>, default: T) -> Result<T, String> {
            match v {
                Some(s) => s.trim().parse().map_err(|_| format!("{key}: cannot parse {s:?}")),
                None => Ok(default),
            }
        }
        let d = Self::default();
        let cfg = Self {
            port: num("GEOEDIT_PORT", lookup("GEOEDIT_PORT"), d.port)?,
            data_dir: lookup("GEOEDIT_DATA_DIR").map(PathBuf::from).unwrap_or(d.data_dir),
            workers: num("GEOEDIT_WORKERS", lookup("GEOEDIT_WORKERS"), d.workers)?,
            checkpoint: lookup("GEOEDIT_CHECKPOINT").map(PathBuf::from).unwrap_or(d.checkpoint),
            ttl: Duration::from_secs(num("GEOEDIT_SESSION_TTL_SECS", lookup("GEOEDIT_SESSION_TTL_SECS"), d.ttl.as_secs())?),
            max_upload_bytes: num("GEOEDIT_MAX_UPLOAD_BYTES", lookup("GEOEDIT_MAX_UPLOAD_BYTES"), d.max_upload_bytes)?,
        };
        if cfg.workers == 0 {
            return Err("GEOEDIT_WORKERS must be at least 1".into());
        }
        Ok(cfg)
    }

    pub fn from_env() -> Result<Self, String> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }
}

pub struct AppState {
    editor: Arc<Editor>,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Session>>,
    pool: Arc<Semaphore>,
}

impl AppState {
    /// Loads any sessions already present under the data directory.
    pub fn new(editor: Arc<Editor>, config: ServiceConfig) -> geoedit_core::Result<Arc<Self>> {
        std::fs::create_dir_all(&config.data_dir)?;
        let mut sessions = HashMap::new();
        for entry in std::fs::read_dir(&config.data_dir)? {
            let dir = entry?.path();
            if dir.join("session.json").exists() {
                match Session::load(&dir) {
                    Ok(s) => {
                        sessions.insert(s.meta.id.clone(), s);
                    }
                    Err(e) => log::warn!("skipping session {}: {e}", dir.display()),
                }
            }
        }
        Ok(Arc::new(Self {
            editor,
            pool: Arc::new(Semaphore::new(config.workers)),
            config,
            sessions: Mutex::new(sessions),
        }))
    }

    /// Side length uploads are resized to.
    pub fn resolution(&self) -> usize {
        self.editor.net().config().resolution
    }

    /// Permits gating pipeline jobs; holding them all pauses the workers.
    pub fn worker_pool(&self) -> Arc<Semaphore> {
        self.pool.clone()
    }

    /// Drops expired sessions with their files; returns how many.
    pub fn sweep(&self, now: Instant) -> usize {
        let mut sessions = self.sessions.lock().unwrap();
        let ids = expired(sessions.values(), now, self.config.ttl);
        for id in &ids {
            if let Some(s) = sessions.remove(id) {
                if let Err(e) = std::fs::remove_dir_all(&s.dir) {
                    log::warn!("removing {}: {e}", s.dir.display());
                }
            }
        }
        ids.len()
    }
}

/// Error body `{"error": kind, "reason": detail}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    reason: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, reason: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            reason: reason.into(),
        }
    }

    fn not_found(what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", what)
    }

    fn bad(reason: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_input", reason)
    }

    fn conflict(reason: &'static str) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", reason)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(_) | Error::DimensionMismatch(_) | Error::Image(_) | Error::Json(_) => Self::bad(e.to_string()),
            Error::OutOfBounds(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "out_of_bounds", e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.kind, "reason": self.reason }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = State<Arc<AppState>>;

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(read_session))
        .route("/sessions/{id}/assist_mask", post(assist_mask))
        .route("/sessions/{id}/masks/{role}", put(set_mask).get(get_mask))
        .route("/sessions/{id}/preview", post(preview))
        .route("/sessions/{id}/run/{job}", post(run_job))
        .route("/sessions/{id}/status", get(status))
        .route("/sessions/{id}/artifacts/{name}", get(artifact))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Loads the checkpoint, binds the port and serves until the process ends.
pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let (net, _) = checkpoint::load(&config.checkpoint)
        .map_err(|e| anyhow::anyhow!("loading checkpoint {}: {e}", config.checkpoint.display()))?;
    let editor = Editor::new(Arc::new(net), Arc::new(PixelCodec), PipelineConfig::default())?
        .with_cache_dir(config.data_dir.join("cache"));
    let state = AppState::new(Arc::new(editor), config.clone())?;
    let sweeper = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let n = sweeper.sweep(Instant::now());
            if n > 0 {
                log::info!("expired {n} sessions");
            }
        }
    });
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(state)).await?;
    Ok(())
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn with_session<T>(state: &AppState, id: &str, f: impl FnOnce(&mut Session) -> ApiResult<T>) -> ApiResult<T> {
    let mut sessions = state.sessions.lock().unwrap();
    let s = sessions.get_mut(id).ok_or_else(|| ApiError::not_found("session"))?;
    s.last_access = Instant::now();
    f(s)
}

fn session_json(s: &Session) -> serde_json::Value {
    json!({
        "id": s.meta.id,
        "height": s.meta.height,
        "width": s.meta.width,
        "original": [s.meta.original.0, s.meta.original.1],
        "masks": s.meta.masks,
        "instruction": s.meta.instruction,
        "prompt": s.meta.prompt,
        "status": s.meta.status,
        "artifacts": s.meta.artifacts.keys().collect::<Vec<_>>(),
        "runs": s.meta.runs,
    })
}

async fn health(State(state): Shared) -> Json<serde_json::Value> {
    let n = state.sessions.lock().unwrap().len();
    Json(json!({
        "status": "ok",
        "sessions": n,
        "resolution": state.resolution(),
        "workers": state.config.workers,
    }))
}

fn decode_upload(bytes: &[u8], res: usize) -> ApiResult<(ImageBuffer, (usize, usize))> {
    let img = image::load_from_memory(bytes).map_err(|e| ApiError::bad(format!("cannot decode image: {e}")))?;
    let rgb = img.to_rgb8();
    let original = (rgb.height() as usize, rgb.width() as usize);
    let rgb = if original == (res, res) {
        rgb
    } else {
        image::imageops::resize(&rgb, res as u32, res as u32, image::imageops::FilterType::Triangle)
    };
    Ok((ImageBuffer::from_rgb8(&rgb), original))
}

async fn create_session(State(state): Shared, body: Bytes) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let (img, original) = decode_upload(&body, state.resolution())?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let s = Session::create(&state.config.data_dir, id.clone(), img, original)?;
    let body = session_json(&s);
    state.sessions.lock().unwrap().insert(id, s);
    Ok((StatusCode::CREATED, Json(body)))
}

async fn read_session(State(state): Shared, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    with_session(&state, &id, |s| Ok(Json(session_json(s))))
}

#[derive(Deserialize)]
struct AssistBody {
    /// `[x, y]` pixel coordinates in the working resolution.
    points: Vec<[usize; 2]>,
    #[serde(default = "default_tolerance")]
    tolerance: f32,
}

fn default_tolerance() -> f32 {
    0.1
}

async fn assist_mask(State(state): Shared, Path(id): Path<String>, Json(body): Json<AssistBody>) -> ApiResult<Response> {
    if body.points.is_empty() {
        return Err(ApiError::bad("no click points"));
    }
    if !(0.0..=1.0).contains(&body.tolerance) {
        return Err(ApiError::bad("tolerance must lie in [0, 1]"));
    }
    let img = with_session(&state, &id, |s| Ok(s.source.clone()))?;
    let clicks: Vec<(usize, usize)> = body.points.iter().map(|p| (p[0], p[1])).collect();
    let mask = assist::region_grow(&img, &clicks, body.tolerance);
    Ok(png(mask.to_png_bytes()?))
}

fn resize_mask(mask: &MaskBuffer, h: usize, w: usize) -> MaskBuffer {
    let g = image::imageops::resize(&mask.to_gray8(), w as u32, h as u32, image::imageops::FilterType::Nearest);
    MaskBuffer::from_gray8(&g)
}

fn parse_role(role: &str) -> ApiResult<MaskRole> {
    MaskRole::parse(role).ok_or_else(|| ApiError::bad(format!("unknown mask role {role:?}")))
}

async fn set_mask(State(state): Shared, Path((id, role)): Path<(String, String)>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let role = parse_role(&role)?;
    let mask = MaskBuffer::from_png_bytes(&body)?;
    with_session(&state, &id, |s| {
        if s.is_running() {
            return Err(ApiError::conflict("job_in_flight"));
        }
        let mask = if (mask.height(), mask.width()) == (s.meta.height, s.meta.width) {
            mask
        } else if (mask.height(), mask.width()) == s.meta.original {
            resize_mask(&mask, s.meta.height, s.meta.width)
        } else {
            return Err(ApiError::bad("mask size matches neither the session image nor the upload"));
        };
        let area = mask.count();
        s.set_mask(role, mask)?;
        Ok(Json(json!({ "role": role, "area": area })))
    })
}

async fn get_mask(State(state): Shared, Path((id, role)): Path<(String, String)>) -> ApiResult<Response> {
    let role = parse_role(&role)?;
    with_session(&state, &id, |s| {
        let m = s.masks.get(&role).ok_or_else(|| ApiError::not_found("mask"))?;
        Ok(png(m.to_png_bytes()?))
    })
}

#[derive(Deserialize)]
struct PreviewBody {
    instruction: EditInstruction,
}

async fn preview(State(state): Shared, Path(id): Path<String>, Json(body): Json<PreviewBody>) -> ApiResult<Json<serde_json::Value>> {
    let (img, mask) = with_session(&state, &id, |s| {
        let m = s.masks.get(&MaskRole::Source).cloned().ok_or(ApiError::conflict("missing_source_mask"))?;
        Ok((s.source.clone(), m))
    })?;
    let req = EditRequest::new(img, mask, body.instruction.clone());
    let (coarse, target) = state.editor.step1(&req)?;
    let coarse = coarse.to_png_bytes()?;
    let target = target.to_png_bytes()?;
    with_session(&state, &id, |s| {
        s.meta.instruction = Some(body.instruction);
        s.persist()?;
        Ok(())
    })?;
    Ok(Json(json!({ "coarse": b64(&coarse), "target_mask": b64(&target) })))
}

#[derive(Deserialize, Default)]
struct RunBody {
    instruction: Option<EditInstruction>,
    prompt: Option<String>,
    seed: Option<u64>,
}

/// Inputs captured when a job is accepted.
struct JobInput {
    kind: JobKind,
    dir: PathBuf,
    run: usize,
    source: ImageBuffer,
    source_mask: MaskBuffer,
    completion: Option<MaskBuffer>,
    instruction: Option<EditInstruction>,
    prompt: Option<String>,
    background: Option<ImageBuffer>,
    seed: u64,
}

async fn run_job(State(state): Shared, Path((id, job)): Path<(String, String)>, body: Bytes) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let kind = JobKind::parse(&job).ok_or_else(|| ApiError::not_found("job kind"))?;
    let body: RunBody = if body.iter().all(u8::is_ascii_whitespace) {
        RunBody::default()
    } else {
        serde_json::from_slice::<Option<RunBody>>(&body)
            .map_err(|e| ApiError::bad(e.to_string()))?
            .unwrap_or_default()
    };
    if let Some(i) = &body.instruction {
        i.validate()?;
    }
    let input = with_session(&state, &id, |s| {
        if s.is_running() {
            return Err(ApiError::conflict("job_in_flight"));
        }
        let source_mask = s.masks.get(&MaskRole::Source).cloned().ok_or(ApiError::conflict("missing_source_mask"))?;
        if let Some(i) = body.instruction.clone() {
            s.meta.instruction = Some(i);
        }
        if body.prompt.is_some() {
            s.meta.prompt = body.prompt.clone();
        }
        if let Some(seed) = body.seed {
            s.meta.seed = seed;
        }
        if kind != JobKind::Inpaint && s.meta.instruction.is_none() {
            return Err(ApiError::conflict("missing_instruction"));
        }
        if kind == JobKind::Refine && s.background.is_none() {
            return Err(ApiError::conflict("missing_inpaint"));
        }
        let (run, _) = s.next_run()?;
        s.meta.status = JobStatus::Running {
            job: kind,
            step: if kind == JobKind::Refine { "transform" } else { "inpaint" }.into(),
        };
        s.persist()?;
        Ok(JobInput {
            kind,
            dir: s.dir.clone(),
            run,
            source: s.source.clone(),
            source_mask,
            completion: s.masks.get(&MaskRole::Completion).cloned(),
            instruction: s.meta.instruction.clone(),
            prompt: s.meta.prompt.clone(),
            background: s.background.clone(),
            seed: s.meta.seed,
        })
    })?;
    let run = input.run;
    let worker = state.clone();
    let pool = state.pool.clone();
    tokio::spawn(async move {
        let Ok(_permit) = pool.acquire_owned().await else { return };
        let id2 = id.clone();
        let st = worker.clone();
        let outcome = tokio::task::spawn_blocking(move || execute(&st, &id2, input)).await;
        let result = match outcome {
            Ok(r) => r,
            Err(e) => Err(format!("worker panicked: {e}")),
        };
        let mut sessions = worker.sessions.lock().unwrap();
        if let Some(s) = sessions.get_mut(&id) {
            match result {
                Ok((files, background)) => {
                    s.meta.artifacts.extend(files);
                    if background.is_some() {
                        s.background = background;
                    }
                    s.meta.status = JobStatus::Done { job: kind, run };
                }
                Err(reason) => s.meta.status = JobStatus::Failed { job: kind, reason },
            }
            if let Err(e) = s.persist() {
                log::warn!("persisting session {id}: {e}");
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job": kind, "run": run, "status": "running" }))))
}

fn set_step(state: &AppState, id: &str, kind: JobKind, step: &str) {
    if let Some(s) = state.sessions.lock().unwrap().get_mut(id) {
        s.meta.status = JobStatus::Running { job: kind, step: step.into() };
    }
}

type JobOutput = (Vec<(String, String)>, Option<ImageBuffer>);

fn execute(state: &AppState, id: &str, job: JobInput) -> Result<JobOutput, String> {
    run_pipeline(state, id, job).map_err(|e| e.to_string())
}

fn run_pipeline(state: &AppState, id: &str, job: JobInput) -> geoedit_core::Result<JobOutput> {
    let editor = &state.editor;
    let mut out: Vec<(&str, Artifact)> = Vec::new();
    let mut background = job.background.clone();
    if job.kind != JobKind::Refine {
        let prompt = editor.config.step2_prompt.clone();
        let s2 = editor.step2(&job.source, &job.source_mask, &prompt, job.seed)?;
        out.push(("background", Artifact::Image(s2.image.clone())));
        background = Some(s2.image);
    }
    if job.kind != JobKind::Inpaint {
        set_step(state, id, job.kind, "transform");
        let instruction = job.instruction.clone().expect("checked on submit");
        let mut req = EditRequest::new(job.source.clone(), job.source_mask.clone(), instruction);
        req.completion_mask = job.completion.clone();
        req.prompt = job.prompt.clone();
        req.depth = None::<DepthMap>;
        let (coarse, target) = editor.step1(&req)?;
        let bg = background.as_ref().expect("inpaint ran or was required");
        let composite = blend(&coarse, bg, &target)?;
        set_step(state, id, job.kind, "refine");
        let s3 = editor.step3(
            &composite,
            &job.source,
            &job.source_mask,
            &target,
            job.completion.as_ref(),
            job.prompt.as_deref(),
            None,
            job.seed.wrapping_add(1),
        )?;
        out.push(("coarse", Artifact::Image(coarse)));
        out.push(("target_mask", Artifact::Mask(target)));
        out.push(("composite", Artifact::Image(composite)));
        out.push(("output", Artifact::Image(s3.image)));
    }
    let files = write_run(&job.dir, job.run, &out)?;
    let new_bg = if job.kind == JobKind::Refine { None } else { background };
    Ok((files, new_bg))
}

async fn status(State(state): Shared, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    with_session(&state, &id, |s| {
        Ok(Json(json!({
            "status": s.meta.status,
            "artifacts": s.meta.artifacts.keys().collect::<Vec<_>>(),
        })))
    })
}

async fn artifact(State(state): Shared, Path((id, name)): Path<(String, String)>) -> ApiResult<Response> {
    let path = with_session(&state, &id, |s| s.artifact_path(&name).ok_or_else(|| ApiError::not_found("artifact")))?;
    let bytes = tokio::fs::read(&path).await.map_err(|e| ApiError::from(Error::Io(e)))?;
    Ok(png(bytes))
}
