//! HTTP/JSON facade over `maskfit-core`, backed by a flat-file [`Store`].
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/health` | liveness and whether a model is loaded |
//! | POST | `/samples` | upload a PGM or PNG image |
//! | GET | `/samples` | list samples |
//! | GET | `/samples/{id}` | sample, latest annotation, latest prediction |
//! | GET | `/samples/{id}/image` | original bytes |
//! | GET/PUT | `/samples/{id}/annotation` | latest annotation (`?version=n` for older) / new version |
//! | GET | `/samples/{id}/annotations` | every version |
//! | POST | `/samples/{id}/predict` | run the model on the nose box |
//! | POST | `/samples/{id}/size` | width, size and tolerance flag |
//! | GET/POST | `/runs` | list runs / start a background leave-one-out run |
//! | GET | `/runs/{id}` | run status |
//! | GET | `/runs/{id}/report` | run report |

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use maskfit_core::api::{
    self, AnnotationDoc, PredictRequest, Prediction, RunState, RunStatus, SampleInfo, SampleView, SizeRequest,
    SizeResponse, StartRunRequest, StoredAnnotation,
};
use maskfit_core::run::{self, RunRecord, RunReport};
use maskfit_core::{Model, SizeChart};
use serde::de::DeserializeOwned;
use serde::Deserialize;

pub mod error;
pub mod store;

pub use error::ApiError;
pub use store::Store;

/// Environment variable naming the store directory.
pub const STORE_ENV: &str = "MASKFIT_STORE";

type ApiResult<T> = Result<T, ApiError>;

pub struct AppState {
    store: Store,
    model: Option<Arc<Model>>,
    chart: SizeChart,
    sample_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    jobs: Mutex<HashMap<String, RunStatus>>,
}

impl AppState {
    pub fn new(store: Store, model: Option<Model>, chart: SizeChart) -> Arc<Self> {
        Arc::new(Self {
            store,
            model: model.map(Arc::new),
            chart,
            sample_locks: Mutex::default(),
            jobs: Mutex::default(),
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn lock_for(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.sample_locks
            .lock()
            .expect("lock poisoned")
            .entry(id.to_string())
            .or_default()
            .clone()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/samples", post(upload_sample).get(list_samples))
        .route("/samples/{id}", get(get_sample))
        .route("/samples/{id}/image", get(get_image))
        .route("/samples/{id}/annotation", get(get_annotation).put(put_annotation))
        .route("/samples/{id}/annotations", get(annotation_history))
        .route("/samples/{id}/predict", post(predict))
        .route("/samples/{id}/size", post(size))
        .route("/runs", get(list_runs).post(start_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/report", get(get_report))
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    serve_on(tokio::net::TcpListener::bind(addr).await?, state).await
}

/// Serves on an already bound listener.
pub async fn serve_on(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}

/// Parses a JSON body; an empty body or `null` yields the default value.
fn json_body<T: DeserializeOwned + Default>(body: &[u8]) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice::<Option<T>>(body)
        .map(Option::unwrap_or_default)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid JSON body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "model_loaded": state.model.is_some() }))
}

async fn upload_sample(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    if let Some(ct) = headers.get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()) {
        let ct = ct.split(';').next().unwrap_or("").trim();
        if ![store::PGM, store::PNG, "application/octet-stream"].contains(&ct) {
            return Err(ApiError::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                format!("expected {} or {}, got {ct}", store::PGM, store::PNG),
            ));
        }
    }
    let (info, created) = blocking(move || state.store.add_sample(&body)).await?;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(info)).into_response())
}

async fn list_samples(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<SampleInfo>>> {
    Ok(Json(state.store.list_samples()?))
}

async fn get_sample(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SampleView>> {
    let sample = state.store.sample(&id)?;
    Ok(Json(SampleView {
        sample,
        annotation: state.store.annotation(&id, None)?,
        prediction: state.store.prediction(&id)?,
    }))
}

async fn get_image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let info = state.store.sample(&id)?;
    let bytes = state.store.image_bytes(&info)?;
    Ok(([(header::CONTENT_TYPE, info.content_type)], bytes).into_response())
}

#[derive(Deserialize)]
struct VersionQuery {
    version: Option<u32>,
}

async fn get_annotation(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<VersionQuery>,
) -> ApiResult<Json<StoredAnnotation>> {
    state.store.sample(&id)?;
    state
        .store
        .annotation(&id, q.version)?
        .map(Json)
        .ok_or_else(|| ApiError::not_found("annotation for sample", &id))
}

async fn annotation_history(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Vec<StoredAnnotation>>> {
    state.store.sample(&id)?;
    Ok(Json(state.store.annotation_history(&id)?))
}

async fn put_annotation(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<StoredAnnotation>> {
    let info = state.store.sample(&id)?;
    let doc: AnnotationDoc = json_body(&body)?;
    doc.validate(info.width, info.height)?;
    let lock = state.lock_for(&id);
    let _guard = lock.lock().await;
    Ok(Json(state.store.put_annotation(&id, doc)?))
}

async fn predict(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<Prediction>> {
    let info = state.store.sample(&id)?;
    let req: PredictRequest = json_body(&body)?;
    let model = state
        .model
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"))?;
    let nose_box = state
        .store
        .annotation(&id, None)?
        .and_then(|a| a.annotation.nose_box)
        .ok_or_else(|| ApiError::conflict("prediction needs an annotation with a nose_box"))?;
    let lock = state.lock_for(&id);
    let _guard = lock.lock().await;
    let st = state.clone();
    let prediction = blocking(move || {
        let image = st.store.image(&info)?;
        let p = api::predict(&model, &image, nose_box, req.crop)?;
        st.store.put_prediction(&info.id, &p)?;
        Ok(p)
    })
    .await?;
    Ok(Json(prediction))
}

async fn size(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<SizeResponse>> {
    state.store.sample(&id)?;
    let req: SizeRequest = json_body(&body)?;
    let annotation = state.store.annotation(&id, None)?.map(|a| a.annotation);
    let prediction = state.store.prediction(&id)?;
    let (landmarks, source) = api::select_landmarks(annotation.as_ref(), prediction.as_ref(), req.source)
        .ok_or_else(|| ApiError::conflict("no landmarks yet: annotate them or request a prediction first"))?;
    let px_per_mm = annotation
        .as_ref()
        .and_then(AnnotationDoc::px_per_mm)
        .ok_or_else(|| ApiError::conflict("no scale yet: annotate the coin first"))??;
    let mut response = api::size_landmarks(landmarks.left, landmarks.right, px_per_mm, &state.chart)?;
    response.source = Some(source);
    Ok(Json(response))
}

fn disk_status(dir: &Path) -> ApiResult<Option<RunStatus>> {
    if !dir.join(run::RUN_FILE).is_file() {
        return Ok(None);
    }
    let record = RunRecord::load(dir)?;
    Ok(Some(RunStatus {
        run_id: record.run_id.clone(),
        state: RunState::Done,
        error: None,
        record: Some(record),
    }))
}

fn run_status(state: &AppState, id: &str) -> ApiResult<RunStatus> {
    if let Some(status) = disk_status(&state.store.run_dir(id)?)? {
        return Ok(status);
    }
    state
        .jobs
        .lock()
        .expect("lock poisoned")
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::not_found("run", id))
}

async fn list_runs(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<RunStatus>>> {
    let mut out: Vec<RunStatus> = run::list_runs(&state.store.runs_dir())?
        .into_iter()
        .map(|(_, record)| RunStatus {
            run_id: record.run_id.clone(),
            state: RunState::Done,
            error: None,
            record: Some(record),
        })
        .collect();
    for job in state.jobs.lock().expect("lock poisoned").values() {
        if job.state != RunState::Done && !out.iter().any(|s| s.run_id == job.run_id) {
            out.push(job.clone());
        }
    }
    out.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(Json(out))
}

async fn get_run(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<RunStatus>> {
    Ok(Json(run_status(&state, &id)?))
}

async fn get_report(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<RunReport>> {
    let status = run_status(&state, &id)?;
    match (status.state, status.record) {
        (RunState::Done, Some(record)) => Ok(Json(record.load_report(&state.store.run_dir(&id)?)?)),
        (RunState::Failed, _) => Err(ApiError::conflict(format!(
            "run `{id}` failed: {}",
            status.error.unwrap_or_default()
        ))),
        _ => Err(ApiError::conflict(format!("run `{id}` is still running"))),
    }
}

/// Starts a leave-one-out run in the background. The run id is derived from
/// the manifest and configuration, so resubmitting returns the existing run.
async fn start_run(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: StartRunRequest = json_body(&body)?;
    let config = req.config.unwrap_or_default();
    config.validate()?;
    let manifest = std::path::PathBuf::from(&req.manifest);
    let bytes = std::fs::read(&manifest).map_err(|e| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("cannot read manifest {}: {e}", manifest.display()))
    })?;
    let run_id = run::derive_run_id(&run::sha256_hex(&bytes), &config)?;
    {
        let mut jobs = state.jobs.lock().expect("lock poisoned");
        if let Some(existing) = jobs.get(&run_id).filter(|j| j.state != RunState::Failed) {
            return Ok((StatusCode::OK, Json(existing.clone())).into_response());
        }
        if let Some(done) = disk_status(&state.store.run_dir(&run_id)?)? {
            return Ok((StatusCode::OK, Json(done)).into_response());
        }
        jobs.insert(
            run_id.clone(),
            RunStatus {
                run_id: run_id.clone(),
                state: RunState::Running,
                error: None,
                record: None,
            },
        );
    }
    let st = state.clone();
    let id = run_id.clone();
    tokio::task::spawn_blocking(move || {
        let out_dir = st.store.runs_dir().join(&id);
        let result = run::run_loocv(&manifest, &config, &st.chart, &out_dir, Some(id.clone()));
        let status = match result {
            Ok(record) => RunStatus {
                run_id: id.clone(),
                state: RunState::Done,
                error: None,
                record: Some(record),
            },
            Err(e) => {
                tracing::warn!(run_id = %id, error = %e, "run failed");
                RunStatus {
                    run_id: id.clone(),
                    state: RunState::Failed,
                    error: Some(e.to_string()),
                    record: None,
                }
            }
        };
        st.jobs.lock().expect("lock poisoned").insert(id, status);
    });
    let status = run_status(&state, &run_id)?;
    Ok((StatusCode::ACCEPTED, Json(status)).into_response())
}
