//! HTTP front end for the editgan pipeline.
//!
//! Sessions hold one embedded image. Edit jobs run on blocking threads,
//! stream progress as server-sent events and can be cancelled; a failed or
//! cancelled job leaves its session untouched. Model weights are loaded
//! once and shared read-only.

pub mod config;
pub mod session;

use std::collections::{BTreeSet, HashMap};
use std::convert::Infallible;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use editgan::checkpoint::Checkpoint;
use editgan::editing::{
    compute_edit_region, learn_editing_vector_with_progress, refine_edit, EditProblem, EditStack, EditingLossConfig, LossComponents,
};
use editgan::embedding::{embed_image, FixedLatent, LatentInitializer, RefinementConfig};
use editgan::library::{list_vectors_for, load_vector_for, save_vector, VectorRecord};
use editgan::metrics::{self, AttributeClassifier, Benchmark, ClassifierConfig, MetricsReport};
use editgan::scenes::{LabelSchema, SceneSample};
use editgan::{ExtendedLatent, Generator, Image, JointSample, Mask};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use config::ServiceConfig;
use session::{AppliedVector, EditSession};

/// Frozen networks shared by all requests.
pub struct Models {
    pub generator: Generator,
    pub initializer: Box<dyn LatentInitializer + Send + Sync>,
    pub generator_hash: String,
    pub palette: Vec<[u8; 3]>,
}

impl Models {
    pub fn from_checkpoint(ck: Checkpoint) -> editgan::Result<Self> {
        let generator = ck.generator;
        if generator.head().is_none() {
            return Err(editgan::Error::NoHead);
        }
        let initializer: Box<dyn LatentInitializer + Send + Sync> = match ck.encoder {
            Some(e) => Box::new(e),
            None => {
                let w = generator.mean_w(1000, 0);
                Box::new(FixedLatent(ExtendedLatent::broadcast(&w, generator.num_style_layers())))
            }
        };
        let generator_hash = generator.fingerprint();
        let palette = palette_for(generator.config().num_labels);
        Ok(Self { generator, initializer, generator_hash, palette })
    }
}

/// The vehicle palette when the label counts agree, a grey ramp otherwise.
pub fn palette_for(num_labels: usize) -> Vec<[u8; 3]> {
    let schema = LabelSchema::vehicle();
    if schema.num_labels() == num_labels {
        return schema.palette;
    }
    (0..num_labels).map(|i| [(i * 255 / num_labels.max(2).saturating_sub(1)).min(255) as u8; 3]).collect()
}

enum ModelState {
    Loading,
    Ready(Arc<Models>),
    Failed(String),
}

struct SessionSlot {
    session: Mutex<EditSession>,
    /// Set while an optimization runs on this session.
    busy: AtomicBool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub step: usize,
    pub loss_total: f64,
    pub loss_rgb: f64,
    pub loss_ce: f64,
    pub loss_id: f64,
}

impl ProgressEvent {
    fn new(step: usize, l: &LossComponents) -> Self {
        Self { step, loss_total: l.total, loss_rgb: l.rgb, loss_ce: l.ce, loss_id: l.id }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Completed { result: Value },
    Failed { error: String },
    Cancelled { step: usize },
}

struct Job {
    session_id: String,
    cancel: AtomicBool,
    events: Mutex<Vec<ProgressEvent>>,
    status: Mutex<JobStatus>,
}

/// Shared service state.
pub struct AppState {
    config: ServiceConfig,
    models: RwLock<ModelState>,
    sessions: Mutex<HashMap<String, Arc<SessionSlot>>>,
    jobs: Mutex<HashMap<String, Arc<Job>>>,
    /// Idempotency key to the response first returned for it.
    replies: Mutex<HashMap<String, (StatusCode, Value)>>,
    classifier: Mutex<Option<Arc<AttributeClassifier>>>,
}

pub type SharedState = Arc<AppState>;

impl AppState {
    /// State without models; `/healthz` answers 503 until [`AppState::set_models`].
    pub fn loading(config: ServiceConfig) -> SharedState {
        Arc::new(Self {
            config,
            models: RwLock::new(ModelState::Loading),
            sessions: Mutex::default(),
            jobs: Mutex::default(),
            replies: Mutex::default(),
            classifier: Mutex::default(),
        })
    }

    pub fn with_models(config: ServiceConfig, models: Models) -> SharedState {
        let s = Self::loading(config);
        s.set_models(models);
        s
    }

    pub fn set_models(&self, models: Models) {
        *self.models.write().expect("model lock") = ModelState::Ready(Arc::new(models));
    }

    pub fn set_load_failure(&self, error: String) {
        *self.models.write().expect("model lock") = ModelState::Failed(error);
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn models(&self) -> Result<Arc<Models>, ApiError> {
        match &*self.models.read().expect("model lock") {
            ModelState::Ready(m) => Ok(m.clone()),
            ModelState::Loading => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "models are loading")),
            ModelState::Failed(e) => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, format!("models failed to load: {e}"))),
        }
    }

    fn slot(&self, id: &str, models: &Models) -> Result<Arc<SessionSlot>, ApiError> {
        if !session::valid_session_id(id) {
            return Err(ApiError::not_found(format!("session {id}")));
        }
        let mut sessions = self.sessions.lock().expect("session table");
        if let Some(s) = sessions.get(id) {
            return Ok(s.clone());
        }
        let dir = &self.config.sessions_dir;
        if !EditSession::dir(dir, id).join("session.json").exists() {
            return Err(ApiError::not_found(format!("session {id}")));
        }
        let s = EditSession::load(dir, id)?;
        if s.latent.num_layers() != models.generator.num_style_layers() {
            return Err(ApiError::new(StatusCode::CONFLICT, format!("session {id} was made with another generator")));
        }
        let slot = Arc::new(SessionSlot { session: Mutex::new(s), busy: AtomicBool::new(false) });
        sessions.insert(id.to_string(), slot.clone());
        Ok(slot)
    }

    fn replay(&self, key: Option<&str>) -> Option<Response> {
        let key = key?;
        let replies = self.replies.lock().expect("reply table");
        replies.get(key).map(|(code, body)| (*code, Json(body.clone())).into_response())
    }

    fn remember(&self, key: Option<&str>, code: StatusCode, body: &Value) {
        if let Some(k) = key {
            self.replies.lock().expect("reply table").insert(k.to_string(), (code, body.clone()));
        }
    }
}

/// An HTTP status with a JSON `{"error": ...}` body.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn not_found(what: String) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("{what} not found"))
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<editgan::Error> for ApiError {
    fn from(e: editgan::Error) -> Self {
        use editgan::Error as E;
        let status = match &e {
            E::EmptyLabelSet | E::EmptyEditRegion => StatusCode::UNPROCESSABLE_ENTITY,
            E::IncompatibleVector { .. } | E::Cancelled { .. } => StatusCode::CONFLICT,
            E::Image(_) | E::LabelOutOfRange { .. } | E::InvalidConfig(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/vectors", get(vectors))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/mask", get(get_mask).put(put_mask))
        .route("/sessions/{id}/edit", post(start_edit))
        .route("/sessions/{id}/apply", post(apply))
        .route("/sessions/{id}/commit", post(commit))
        .route("/jobs/{id}", get(job_status))
        .route("/jobs/{id}/events", get(job_events))
        .route("/jobs/{id}/cancel", post(cancel_job))
        .route("/benchmark", post(benchmark))
        .layer(DefaultBodyLimit::max(16 << 20))
        .with_state(state)
}

/// Binds the configured address, loads the checkpoint in the background and
/// serves until the process ends.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    std::fs::create_dir_all(&config.sessions_dir)?;
    std::fs::create_dir_all(&config.vectors_dir)?;
    let addr = format!("{}:{}", config.host, config.port);
    let state = AppState::loading(config);
    let loader = state.clone();
    tokio::task::spawn_blocking(move || {
        let path = loader.config().checkpoint.clone();
        match Checkpoint::load(&path).and_then(Models::from_checkpoint) {
            Ok(m) => {
                log::info!("loaded {} (generator {})", path.display(), &m.generator_hash[..16]);
                loader.set_models(m);
            }
            Err(e) => {
                log::error!("loading {}: {e}", path.display());
                loader.set_load_failure(e.to_string());
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(state)).await
}

fn png_b64(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

fn decode_b64(field: &str, text: &str) -> ApiResult<Vec<u8>> {
    B64.decode(text).map_err(|e| ApiError::bad_request(format!("{field}: invalid base64: {e}")))
}

fn idempotency_key(headers: &HeaderMap) -> Option<String> {
    headers.get("idempotency-key").and_then(|v| v.to_str().ok()).map(str::to_string)
}

fn sample_json(models: &Models, sample: &JointSample, latent: &ExtendedLatent) -> ApiResult<Value> {
    let mask = sample.mask.as_ref().ok_or(editgan::Error::NoHead)?;
    Ok(json!({
        "image": png_b64(&sample.image.to_png()?),
        "mask": png_b64(&mask.to_png(&models.palette)?),
        "latent_hash": latent.content_hash(),
    }))
}

fn check_resolution(models: &Models, h: usize, w: usize) -> ApiResult<()> {
    let r = models.generator.resolution();
    if h != r || w != r {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("expected {r}×{r}, got {h}×{w}")));
    }
    Ok(())
}

fn decode_mask(models: &Models, bytes: &[u8]) -> ApiResult<Mask> {
    let mask = Mask::from_png(bytes).map_err(|e| ApiError::bad_request(format!("mask: {e}")))?;
    mask.validate(models.generator.config().num_labels).map_err(|e| ApiError::bad_request(format!("mask: {e}")))?;
    check_resolution(models, mask.height(), mask.width())?;
    Ok(mask)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn healthz(State(state): State<SharedState>) -> Response {
    match &*state.models.read().expect("model lock") {
        ModelState::Ready(m) => Json(json!({ "status": "ok", "generator_hash": m.generator_hash })).into_response(),
        ModelState::Loading => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading" }))).into_response(),
        ModelState::Failed(e) => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "failed", "error": e }))).into_response(),
    }
}

async fn vectors(State(state): State<SharedState>) -> ApiResult<Response> {
    let models = state.models()?;
    let dir = &state.config.vectors_dir;
    if !dir.exists() {
        return Ok(Json(json!({ "entries": [], "warnings": [] })).into_response());
    }
    let catalog = list_vectors_for(dir, &models.generator_hash)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], catalog.to_json()).into_response())
}

#[derive(Deserialize)]
struct CreateQuery {
    steps: Option<usize>,
}

async fn create_session(State(state): State<SharedState>, headers: HeaderMap, Query(q): Query<CreateQuery>, body: Bytes) -> ApiResult<Response> {
    let key = idempotency_key(&headers);
    if let Some(r) = state.replay(key.as_deref()) {
        return Ok(r);
    }
    let models = state.models()?;
    let image = Image::from_png(&body).map_err(|e| ApiError::bad_request(format!("image: {e}")))?;
    check_resolution(&models, image.height(), image.width())?;
    let steps = q.steps.unwrap_or(state.config.embed_steps);
    let st = state.clone();
    let body = blocking(move || {
        let cfg = RefinementConfig { steps, ..RefinementConfig::default() };
        let r = embed_image(&models.generator, models.initializer.as_ref(), &image, &cfg)?;
        let sample = models.generator.synthesize(&r.w_plus)?;
        let mask = sample.mask.clone().ok_or(editgan::Error::NoHead)?;
        let id = uuid::Uuid::new_v4().to_string();
        let session = EditSession::new(id.clone(), image, r.w_plus.clone(), mask);
        session.save(&st.config.sessions_dir, &models.palette)?;
        let slot = Arc::new(SessionSlot { session: Mutex::new(session), busy: AtomicBool::new(false) });
        st.sessions.lock().expect("session table").insert(id.clone(), slot);
        let mut out = sample_json(&models, &sample, &r.w_plus)?;
        out["session_id"] = json!(id);
        out["reconstruction"] = out["image"].take();
        out.as_object_mut().map(|o| o.remove("image"));
        out["loss"] = json!(r.final_loss);
        Ok(out)
    })
    .await?;
    state.remember(key.as_deref(), StatusCode::CREATED, &body);
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn get_session(State(state): State<SharedState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let models = state.models()?;
    let slot = state.slot(&id, &models)?;
    let s = slot.session.lock().expect("session");
    Ok(Json(json!({
        "session_id": s.id,
        "latent_hash": s.latent.content_hash(),
        "applied": s.applied,
        "history": s.history,
        "has_user_mask": s.user_mask.is_some(),
        "busy": slot.busy.load(Ordering::SeqCst),
    })))
}

async fn get_mask(State(state): State<SharedState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let models = state.models()?;
    let slot = state.slot(&id, &models)?;
    let s = slot.session.lock().expect("session");
    let bytes = match &s.user_mask {
        Some(b) => b.clone(),
        None => s.predicted_mask.to_png(&models.palette)?,
    };
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn put_mask(State(state): State<SharedState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<StatusCode> {
    let models = state.models()?;
    let slot = state.slot(&id, &models)?;
    decode_mask(&models, &body)?;
    let mut s = slot.session.lock().expect("session");
    let previous = s.user_mask.replace(body.to_vec());
    if let Err(e) = s.save(&state.config.sessions_dir, &models.palette) {
        s.user_mask = previous;
        return Err(e.into());
    }
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct EditRequest {
    /// Base64 indexed PNG; the uploaded session mask when absent.
    mask: Option<String>,
    labels: Vec<u8>,
    steps: Option<usize>,
    name: Option<String>,
    #[serde(default)]
    save_vector: bool,
    #[serde(default)]
    notes: String,
}

async fn start_edit(State(state): State<SharedState>, UrlPath(id): UrlPath<String>, headers: HeaderMap, Json(req): Json<EditRequest>) -> ApiResult<Response> {
    let key = idempotency_key(&headers);
    if let Some(r) = state.replay(key.as_deref()) {
        return Ok(r);
    }
    let models = state.models()?;
    let slot = state.slot(&id, &models)?;
    let (problem, y_edited_bytes) = {
        let s = slot.session.lock().expect("session");
        let bytes = match &req.mask {
            Some(m) => decode_b64("mask", m)?,
            None => s.user_mask.clone().ok_or_else(|| ApiError::bad_request("no mask in the request and none uploaded"))?,
        };
        let y_edited = decode_mask(&models, &bytes)?;
        let q: BTreeSet<u8> = req.labels.iter().copied().collect();
        let num_labels = models.generator.config().num_labels;
        if let Some(&l) = q.iter().find(|&&l| l as usize >= num_labels) {
            return Err(editgan::Error::LabelOutOfRange { label: l as usize, num_labels }.into());
        }
        let cfg = EditingLossConfig::learn();
        let region = compute_edit_region(&s.predicted_mask, &y_edited, &q, cfg.buffer_px)?;
        if region.is_empty() {
            return Err(editgan::Error::EmptyEditRegion.into());
        }
        let x = models.generator.render(&s.latent)?;
        (EditProblem { base_w: s.latent.clone(), x, y_edited, region }, bytes)
    };
    if slot.busy.swap(true, Ordering::SeqCst) {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("an optimization is already running on session {id}")));
    }
    let job_id = uuid::Uuid::new_v4().to_string();
    let job = Arc::new(Job {
        session_id: id.clone(),
        cancel: AtomicBool::new(false),
        events: Mutex::default(),
        status: Mutex::new(JobStatus::Running),
    });
    state.jobs.lock().expect("job table").insert(job_id.clone(), job.clone());
    let body = json!({ "job_id": job_id, "session_id": id });
    state.remember(key.as_deref(), StatusCode::ACCEPTED, &body);

    let st = state.clone();
    tokio::task::spawn_blocking(move || {
        let status = run_edit_job(&st, &models, &slot, &job, problem, y_edited_bytes, req);
        slot.busy.store(false, Ordering::SeqCst);
        *job.status.lock().expect("job status") = status;
    });
    Ok((StatusCode::ACCEPTED, Json(body)).into_response())
}

fn run_edit_job(
    state: &AppState,
    models: &Models,
    slot: &SessionSlot,
    job: &Job,
    problem: EditProblem,
    y_edited_bytes: Vec<u8>,
    req: EditRequest,
) -> JobStatus {
    let cfg = EditingLossConfig { steps: req.steps.unwrap_or(state.config.edit_steps), ..EditingLossConfig::learn() };
    let every = state.config.progress_every.max(1);
    let name = req.name.clone().unwrap_or_else(|| format!("edit-{}", &job.session_id[..8.min(job.session_id.len())]));
    let learned = learn_editing_vector_with_progress(&models.generator, &problem, &cfg, &name, |step, l| {
        if step % every == 0 || step == cfg.steps {
            job.events.lock().expect("job events").push(ProgressEvent::new(step, l));
        }
        !job.cancel.load(Ordering::SeqCst)
    });
    let learned = match learned {
        Ok(l) => l,
        Err(editgan::Error::Cancelled { step }) => return JobStatus::Cancelled { step },
        Err(e) => return JobStatus::Failed { error: e.to_string() },
    };
    let outcome = (|| -> editgan::Result<Value> {
        let w = problem.base_w.offset(&learned.vector.delta, 1.0)?.rounded_to_f32();
        let sample = models.generator.synthesize(&w)?;
        let mask = sample.mask.clone().ok_or(editgan::Error::NoHead)?;
        let mut vector_file = Value::Null;
        if req.save_vector {
            std::fs::create_dir_all(&state.config.vectors_dir)?;
            let record = VectorRecord { notes: req.notes.clone(), ..VectorRecord::new(learned.vector.clone(), models.generator_hash.clone()) };
            let p = save_vector(&state.config.vectors_dir, &record)?;
            vector_file = json!(p.file_name().map(|n| n.to_string_lossy().into_owned()));
        }
        let mut s = slot.session.lock().expect("session");
        let before = s.clone();
        s.latent = w.clone();
        s.predicted_mask = mask.clone();
        s.user_mask = None;
        s.record(format!("edit:{name}"));
        if let Err(e) = s.save(&state.config.sessions_dir, &models.palette) {
            *s = before;
            return Err(e);
        }
        let best = learned.trace.best();
        Ok(json!({
            "image": png_b64(&sample.image.to_png()?),
            "mask": png_b64(&mask.to_png(&models.palette)?),
            "target_mask": png_b64(&y_edited_bytes),
            "latent_hash": w.content_hash(),
            "vector": learned.vector.name,
            "vector_file": vector_file,
            "best_step": learned.trace.best_step,
            "loss": best,
        }))
    })();
    match outcome {
        Ok(result) => JobStatus::Completed { result },
        Err(e) => JobStatus::Failed { error: e.to_string() },
    }
}

fn job(state: &AppState, id: &str) -> ApiResult<Arc<Job>> {
    state.jobs.lock().expect("job table").get(id).cloned().ok_or_else(|| ApiError::not_found(format!("job {id}")))
}

async fn job_status(State(state): State<SharedState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let j = job(&state, &id)?;
    let mut body = serde_json::to_value(&*j.status.lock().expect("job status")).expect("status serializes");
    body["job_id"] = json!(id);
    body["session_id"] = json!(j.session_id);
    body["events"] = json!(j.events.lock().expect("job events").len());
    Ok(Json(body))
}

async fn cancel_job(State(state): State<SharedState>, UrlPath(id): UrlPath<String>) -> ApiResult<StatusCode> {
    job(&state, &id)?.cancel.store(true, Ordering::SeqCst);
    Ok(StatusCode::ACCEPTED)
}

/// `progress` events as they are recorded, then one `end` event carrying
/// the final status.
async fn job_events(State(state): State<SharedState>, UrlPath(id): UrlPath<String>) -> ApiResult<Sse<impl futures::Stream<Item = Result<Event, Infallible>>>> {
    let j = job(&state, &id)?;
    let stream = futures::stream::unfold((j, 0usize, false), |(j, sent, finished)| async move {
        if finished {
            return None;
        }
        loop {
            let pending: Vec<ProgressEvent> = j.events.lock().expect("job events")[sent..].to_vec();
            if let Some(ev) = pending.first() {
                let e = Event::default().event("progress").json_data(ev).expect("event serializes");
                return Some((Ok(e), (j, sent + 1, false)));
            }
            let status = j.status.lock().expect("job status").clone();
            if status != JobStatus::Running {
                let e = Event::default().event("end").json_data(&status).expect("status serializes");
                return Some((Ok(e), (j, sent, true)));
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    });
    Ok(Sse::new(stream))
}

#[derive(Deserialize)]
struct EditEntry {
    vector: String,
    scale: f64,
}

#[derive(Deserialize)]
struct ApplyRequest {
    vector: Option<String>,
    #[serde(default = "one")]
    scale: f64,
    /// Several vectors at once; their scales add per vector.
    #[serde(default)]
    edits: Vec<EditEntry>,
    #[serde(default)]
    refine_steps: usize,
}

fn one() -> f64 {
    1.0
}

fn find_vector(state: &AppState, models: &Models, name: &str) -> ApiResult<VectorRecord> {
    let dir = &state.config.vectors_dir;
    let catalog = if dir.exists() { list_vectors_for(dir, &models.generator_hash)? } else { Default::default() };
    let entry = catalog.find(name).ok_or_else(|| ApiError::not_found(format!("vector {name}")))?;
    Ok(load_vector_for(&dir.join(&entry.file), &models.generator_hash)?)
}

/// Applies library vectors to the session latent without changing the
/// session; `refine_steps > 0` adds self-supervised refinement.
async fn apply(State(state): State<SharedState>, UrlPath(id): UrlPath<String>, Json(req): Json<ApplyRequest>) -> ApiResult<Json<Value>> {
    let models = state.models()?;
    let slot = state.slot(&id, &models)?;
    let mut edits: Vec<(String, f64)> = req.edits.iter().map(|e| (e.vector.clone(), e.scale)).collect();
    if let Some(v) = &req.vector {
        edits.push((v.clone(), req.scale));
    }
    if edits.is_empty() {
        return Err(ApiError::bad_request("no vector given"));
    }
    if req.refine_steps > 0 && edits.len() != 1 {
        return Err(ApiError::bad_request("refinement takes exactly one vector"));
    }
    let records: Vec<(VectorRecord, f64)> = edits.iter().map(|(n, s)| find_vector(&state, &models, n).map(|r| (r, *s))).collect::<ApiResult<_>>()?;
    let base = slot.session.lock().expect("session").latent.clone();
    if req.refine_steps == 0 {
        let mut stack = EditStack::new(base);
        for (r, s) in &records {
            stack.push(&r.vector, *s)?;
        }
        // sessions hold f32 latents, so the preview matches a commit
        let w = stack.latent().rounded_to_f32();
        let sample = models.generator.synthesize(&w)?;
        return Ok(Json(sample_json(&models, &sample, &w)?));
    }
    if slot.busy.swap(true, Ordering::SeqCst) {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("an optimization is already running on session {id}")));
    }
    let (record, scale) = records.into_iter().next().expect("one vector");
    let steps = req.refine_steps;
    let s2 = slot.clone();
    let out = blocking(move || {
        let r = refine_edit(&models.generator, &base, &record.vector, scale, steps, &EditingLossConfig::refine());
        s2.busy.store(false, Ordering::SeqCst);
        let r = r?;
        let mut body = sample_json(&models, &r.sample, &r.latent)?;
        body["trace"] = json!(r.trace.map(|t| t.losses).unwrap_or_default());
        Ok(body)
    })
    .await;
    slot.busy.store(false, Ordering::SeqCst);
    Ok(Json(out?))
}

#[derive(Deserialize)]
struct CommitRequest {
    vector: String,
    scale: f64,
}

/// Moves the session latent by a library vector and records it.
async fn commit(State(state): State<SharedState>, UrlPath(id): UrlPath<String>, headers: HeaderMap, Json(req): Json<CommitRequest>) -> ApiResult<Response> {
    let key = idempotency_key(&headers);
    if let Some(r) = state.replay(key.as_deref()) {
        return Ok(r);
    }
    let models = state.models()?;
    let slot = state.slot(&id, &models)?;
    let record = find_vector(&state, &models, &req.vector)?;
    if slot.busy.load(Ordering::SeqCst) {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("an optimization is running on session {id}")));
    }
    let mut s = slot.session.lock().expect("session");
    let before = s.clone();
    let w = s.latent.offset(&record.vector.delta, req.scale)?.rounded_to_f32();
    let sample = models.generator.synthesize(&w)?;
    s.latent = w.clone();
    s.predicted_mask = sample.mask.clone().ok_or(editgan::Error::NoHead)?;
    s.applied.push(AppliedVector { name: req.vector.clone(), scale: req.scale });
    s.record(format!("apply:{}@{}", req.vector, req.scale));
    if let Err(e) = s.save(&state.config.sessions_dir, &models.palette) {
        *s = before;
        return Err(e.into());
    }
    let body = sample_json(&models, &sample, &w)?;
    state.remember(key.as_deref(), StatusCode::OK, &body);
    Ok(Json(body).into_response())
}

#[derive(Deserialize)]
struct BenchmarkRequest {
    vector: String,
    #[serde(default = "default_scales")]
    scales: Vec<f64>,
    #[serde(default = "default_refine")]
    refine_steps: Vec<usize>,
    #[serde(default = "default_images")]
    n_images: usize,
    #[serde(default)]
    seed: u64,
    /// Attribute value the edit should produce.
    #[serde(default = "default_target")]
    target: bool,
}

fn default_scales() -> Vec<f64> {
    metrics::SCALE_GRID.to_vec()
}
fn default_refine() -> Vec<usize> {
    vec![0]
}
fn default_images() -> usize {
    12
}
fn default_target() -> bool {
    true
}

/// Headlight classifier on synthetic scenes at the generator resolution.
pub fn scene_attribute_classifier(resolution: usize) -> editgan::Result<AttributeClassifier> {
    let scenes: Vec<SceneSample> = (0..300u64).map(|i| SceneSample::generate(resolution, 20_000 + i)).collect();
    let images: Vec<Image> = scenes.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<bool> = scenes.iter().map(|s| s.params.headlight_on).collect();
    Ok(metrics::train_attribute_classifier(&images, &labels, &ClassifierConfig::default())?.0)
}

/// Sweeps a library vector over generator samples; the reference set is the
/// unedited samples.
async fn benchmark(State(state): State<SharedState>, Json(req): Json<BenchmarkRequest>) -> ApiResult<Json<Value>> {
    let models = state.models()?;
    if req.n_images < 2 {
        return Err(ApiError::bad_request("n_images must be at least 2"));
    }
    let record = find_vector(&state, &models, &req.vector)?;
    let st = state.clone();
    let rows: Vec<MetricsReport> = blocking(move || {
        let clf = {
            let mut cached = st.classifier.lock().expect("classifier");
            match &*cached {
                Some(c) => c.clone(),
                None => {
                    let c = Arc::new(scene_attribute_classifier(models.generator.resolution())?);
                    *cached = Some(c.clone());
                    c
                }
            }
        };
        let gen = &models.generator;
        let latents: Vec<ExtendedLatent> =
            (0..req.n_images as u64).map(|i| gen.map_to_w_plus(&gen.sample_latent(req.seed + i))).collect::<editgan::Result<_>>()?;
        let reference: Vec<Image> = latents.iter().map(|w| gen.render(w)).collect::<editgan::Result<_>>()?;
        Ok(metrics::run_benchmark(&Benchmark {
            generator: gen,
            vector: &record.vector,
            scales: &req.scales,
            refine_steps: &req.refine_steps,
            test_latents: &latents,
            reference: &reference,
            classifier: &clf,
            target: req.target,
            refine_config: EditingLossConfig::refine(),
        })?)
    })
    .await?;
    Ok(Json(json!({ "rows": rows, "csv": metrics::reports_to_csv(&rows) })))
}

/// Loads a checkpoint into service models.
pub fn load_models(path: &Path) -> editgan::Result<Models> {
    Models::from_checkpoint(Checkpoint::load(path)?)
}
