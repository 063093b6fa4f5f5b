//! HTTP service exposing the estimation engine: run submission and polling,
//! prediction retrieval, attribution reports, metrics, one-off estimates,
//! and repeated extraction.
//!
//! Runs execute as background jobs; run directories are content-addressed,
//! so resubmitting identical inputs reuses the completed artifacts.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};

use prism_client::api::{
    error_kind, ConfigSource, DatasetSource, ErrorBody, EstimateRequest, EstimateResponse,
    ExtractRequest, ExtractResponse, HealthResponse, MetricsInputSource, MetricsRequest,
    MetricsResponse, RunListEntry, RunState, RunStatusResponse, SubmitRunRequest,
    SubmitRunResponse,
};
use prism_core::datasets::{balanced_sample, load_csv, load_task_config, parse_task_config, Dataset, TaskConfig};
use prism_core::error::Error as CoreError;
use prism_core::runs::{
    attribution_report_from_result, comparison_csv, evaluate_predictions, execute_run,
    explain_instance, find_run_dir, load_run_dir, run_extraction, run_fingerprint,
    write_run_dir, Method, MethodPredictions, RunOutput, RunRequest,
};
use prism_core::rng::substream;
use prism_core::shapley::{prism_estimate, ClampCounter};
use prism_core::tabular::tabular_prism;

// ── State ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum JobState {
    Queued,
    Running,
    Completed { dir: PathBuf },
    Failed { error: String },
}

/// Shared service state: the runs directory and the in-memory job registry.
pub struct AppState {
    runs_dir: PathBuf,
    jobs: Mutex<HashMap<String, JobState>>,
}

impl AppState {
    pub fn new(runs_dir: impl Into<PathBuf>) -> Arc<Self> {
        Arc::new(AppState { runs_dir: runs_dir.into(), jobs: Mutex::new(HashMap::new()) })
    }

    fn set_job(&self, run_id: &str, state: JobState) {
        self.jobs.lock().expect("job registry").insert(run_id.to_string(), state);
    }

    fn job(&self, run_id: &str) -> Option<JobState> {
        self.jobs.lock().expect("job registry").get(run_id).cloned()
    }
}

// ── Error mapping ─────────────────────────────────────────────────────

struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl From<CoreError> for ApiError {
    fn from(error: CoreError) -> Self {
        let (status, kind) = error_kind(&error);
        ApiError {
            status: StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            body: ErrorBody { kind: kind.to_string(), message: error.to_string() },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

// ── Input resolution ──────────────────────────────────────────────────

fn resolve_config(source: &ConfigSource) -> ApiResult<TaskConfig> {
    match (&source.path, &source.toml) {
        (Some(path), _) => Ok(load_task_config(Path::new(path))?),
        (None, Some(text)) => Ok(parse_task_config(text, Path::new("."))?),
        (None, None) => Err(CoreError::Config("config needs a path or inline TOML".into()).into()),
    }
}

fn resolve_dataset(source: &DatasetSource, config: &TaskConfig) -> ApiResult<Dataset> {
    let mut dataset = match (&source.csv_path, &source.inline) {
        (Some(path), _) => load_csv(Path::new(path), config)?,
        (None, Some(inline)) => inline.clone(),
        (None, None) => {
            return Err(CoreError::Config("dataset needs a csv_path or inline rows".into()).into())
        }
    };
    if let Some(per_class) = source.balance_per_class {
        let mut rng = substream(source.balance_seed, &["balance"]);
        dataset = balanced_sample(&dataset, per_class, &mut rng)?;
    }
    Ok(dataset)
}

// ── Handlers ──────────────────────────────────────────────────────────

async fn health() -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

async fn submit_run(
    State(state): State<Arc<AppState>>,
    Json(request): Json<SubmitRunRequest>,
) -> ApiResult<Json<SubmitRunResponse>> {
    let config = resolve_config(&request.config)?;
    let dataset = resolve_dataset(&request.dataset, &config)?;
    let demos = match &request.demos {
        Some(source) => Some(resolve_dataset(source, &config)?),
        None => None,
    };
    let k = request.options.k.unwrap_or(config.spec.k);
    let run_id = run_fingerprint(
        &config.fingerprint,
        &dataset.provenance.fingerprint,
        &request.method,
        &request.oracle.model_label(),
        request.options.seed,
        k,
    );

    if !request.force_rerun {
        if let Some(dir) = find_run_dir(&state.runs_dir, &run_id) {
            state.set_job(&run_id, JobState::Completed { dir });
            return Ok(Json(SubmitRunResponse {
                run_id,
                state: RunState::Completed,
                resumed: true,
            }));
        }
    }

    state.set_job(&run_id, JobState::Queued);
    let engine_request = RunRequest {
        config,
        dataset,
        method: request.method.clone(),
        oracle_spec: request.oracle.clone(),
        options: request.options.clone(),
        demos,
    };
    let job_state = state.clone();
    let job_run_id = run_id.clone();
    tokio::spawn(async move {
        job_state.set_job(&job_run_id, JobState::Running);
        match execute_run(&engine_request).await {
            Ok(output) => match write_run_dir(&output, &job_state.runs_dir) {
                Ok(dir) => job_state.set_job(&job_run_id, JobState::Completed { dir }),
                Err(e) => job_state.set_job(&job_run_id, JobState::Failed { error: e.to_string() }),
            },
            Err(e) => job_state.set_job(&job_run_id, JobState::Failed { error: e.to_string() }),
        }
    });
    Ok(Json(SubmitRunResponse { run_id, state: RunState::Queued, resumed: false }))
}

fn completed_output(state: &AppState, run_id: &str) -> ApiResult<(PathBuf, RunOutput)> {
    let dir = match state.job(run_id) {
        Some(JobState::Completed { dir }) => dir,
        Some(JobState::Failed { error }) => {
            return Err(CoreError::query(format!("run {run_id}"), error).into())
        }
        Some(_) => {
            return Err(CoreError::NotFound(format!("run {run_id} has not completed")).into())
        }
        None => find_run_dir(&state.runs_dir, run_id)
            .ok_or_else(|| CoreError::NotFound(format!("run {run_id} not found")))?,
    };
    let output = load_run_dir(&dir)?;
    Ok((dir, output))
}

async fn run_status(
    State(state): State<Arc<AppState>>,
    UrlPath(run_id): UrlPath<String>,
) -> ApiResult<Json<RunStatusResponse>> {
    let job = state.job(&run_id);
    let response = match job {
        Some(JobState::Queued) => RunStatusResponse {
            run_id,
            state: RunState::Queued,
            manifest: None,
            error: None,
            run_dir: None,
        },
        Some(JobState::Running) => RunStatusResponse {
            run_id,
            state: RunState::Running,
            manifest: None,
            error: None,
            run_dir: None,
        },
        Some(JobState::Failed { error }) => RunStatusResponse {
            run_id,
            state: RunState::Failed,
            manifest: None,
            error: Some(error),
            run_dir: None,
        },
        Some(JobState::Completed { dir }) => {
            let output = load_run_dir(&dir)?;
            RunStatusResponse {
                run_id,
                state: RunState::Completed,
                manifest: Some(output.manifest),
                error: None,
                run_dir: Some(dir.display().to_string()),
            }
        }
        None => {
            let dir = find_run_dir(&state.runs_dir, &run_id)
                .ok_or_else(|| CoreError::NotFound(format!("run {run_id} not found")))?;
            let output = load_run_dir(&dir)?;
            RunStatusResponse {
                run_id,
                state: RunState::Completed,
                manifest: Some(output.manifest),
                error: None,
                run_dir: Some(dir.display().to_string()),
            }
        }
    };
    Ok(Json(response))
}

async fn list_runs(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<RunListEntry>>> {
    let mut entries: HashMap<String, RunState> = HashMap::new();
    // disk first, registry overrides with live state
    if state.runs_dir.exists() {
        for entry in std::fs::read_dir(&state.runs_dir).map_err(CoreError::from)? {
            let entry = entry.map_err(CoreError::from)?;
            let manifest_path = entry.path().join("manifest.json");
            if manifest_path.exists() {
                if let Ok(output) = load_run_dir(&entry.path()) {
                    entries.insert(output.manifest.run_id, RunState::Completed);
                }
            }
        }
    }
    for (run_id, job) in state.jobs.lock().expect("job registry").iter() {
        let run_state = match job {
            JobState::Queued => RunState::Queued,
            JobState::Running => RunState::Running,
            JobState::Completed { .. } => RunState::Completed,
            JobState::Failed { .. } => RunState::Failed,
        };
        entries.insert(run_id.clone(), run_state);
    }
    let mut list: Vec<RunListEntry> = entries
        .into_iter()
        .map(|(run_id, state)| RunListEntry { run_id, state })
        .collect();
    list.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(Json(list))
}

async fn run_predictions(
    State(state): State<Arc<AppState>>,
    UrlPath(run_id): UrlPath<String>,
) -> ApiResult<Response> {
    let (_, output) = completed_output(&state, &run_id)?;
    let body = output.predictions_jsonl().map_err(ApiError::from)?;
    Ok(([(axum::http::header::CONTENT_TYPE, "application/jsonl")], body).into_response())
}

async fn run_explain(
    State(state): State<Arc<AppState>>,
    UrlPath((run_id, instance_id)): UrlPath<(String, String)>,
) -> ApiResult<Json<prism_core::runs::AttributionReport>> {
    let (_, output) = completed_output(&state, &run_id)?;
    Ok(Json(explain_instance(&output, &instance_id)?))
}

async fn metrics(
    State(state): State<Arc<AppState>>,
    Json(request): Json<MetricsRequest>,
) -> ApiResult<Json<MetricsResponse>> {
    let mut reports = Vec::with_capacity(request.inputs.len());
    let mut curves = std::collections::BTreeMap::new();
    for input in &request.inputs {
        let records = resolve_metrics_input(&state, input)?;
        let method = MethodPredictions { method: input.method.clone(), records };
        let report = evaluate_predictions(
            &method,
            request.labels.as_ref(),
            request.calibration.as_ref(),
            request.bootstrap,
        )?;
        if let Some(curve) = &report.reliability {
            curves.insert(input.method.clone(), curve.to_csv());
        }
        reports.push(report);
    }
    let comparison_csv = comparison_csv(&reports);
    Ok(Json(MetricsResponse { reports, comparison_csv, curves_csv: curves }))
}

fn resolve_metrics_input(
    state: &AppState,
    input: &MetricsInputSource,
) -> ApiResult<Vec<prism_core::runs::PredictionRecord>> {
    if let Some(run_id) = &input.run_id {
        let (_, output) = completed_output(state, run_id)?;
        return Ok(output.predictions);
    }
    if let Some(jsonl) = &input.predictions_jsonl {
        return Ok(RunOutput::predictions_from_jsonl(jsonl)?);
    }
    Err(CoreError::Config("metrics input needs run_id or predictions_jsonl".into()).into())
}

async fn estimate(
    Json(request): Json<EstimateRequest>,
) -> ApiResult<Json<EstimateResponse>> {
    let config = resolve_config(&request.config)?;
    let task = config.spec.clone();
    let (oracle, _) = request.oracle.build()?;
    let clamps = ClampCounter::new();
    let k = request.options.k.unwrap_or(task.k);
    let base_logit =
        prism_core::datasets::resolve_base_logit(&task, oracle.as_ref(), &clamps).await?;
    let instance_id = "adhoc";
    let result = match request.method {
        Method::Prism => {
            prism_estimate(
                &task,
                &request.instance,
                base_logit,
                oracle.as_ref(),
                k,
                request.options.seed,
                instance_id,
                &clamps,
            )
            .await?
        }
        Method::TabularPrism => {
            tabular_prism(
                &task,
                &request.instance,
                base_logit,
                oracle.as_ref(),
                k,
                request.options.seed,
                instance_id,
                &clamps,
            )
            .await?
        }
        ref other => {
            return Err(CoreError::Config(format!(
                "estimate endpoint supports attribution methods, not {}",
                other.id()
            ))
            .into())
        }
    };
    let report = attribution_report_from_result(
        &task,
        instance_id,
        &request.instance,
        &result,
        &request.method.id(),
    );
    Ok(Json(EstimateResponse { result, report }))
}

async fn extract(Json(request): Json<ExtractRequest>) -> ApiResult<Json<ExtractResponse>> {
    let config = resolve_config(&request.config)?;
    let task = config.spec.clone();
    let (oracle, _) = request.oracle.build()?;
    let clamps = ClampCounter::new();
    let k = request.options.k.unwrap_or(task.k);
    let output = run_extraction(
        oracle.as_ref(),
        &task,
        &request.extraction,
        k,
        request.options.seed,
        &clamps,
    )
    .await?;
    Ok(Json(ExtractResponse { output }))
}

// ── Router and serving ────────────────────────────────────────────────

/// Builds the service router over shared state.
pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/runs", post(submit_run).get(list_runs))
        .route("/v1/runs/{run_id}", get(run_status))
        .route("/v1/runs/{run_id}/predictions", get(run_predictions))
        .route("/v1/runs/{run_id}/explain/{instance_id}", get(run_explain))
        .route("/v1/metrics", post(metrics))
        .route("/v1/estimate", post(estimate))
        .route("/v1/extract", post(extract))
        .with_state(state)
}

/// Binds and serves until the task is aborted.
pub async fn serve(addr: SocketAddr, runs_dir: PathBuf) -> std::io::Result<()> {
    let state = AppState::new(runs_dir);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("serving on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

/// Binds an ephemeral port and serves in a background task; used by the CLI's
/// embedded mode and by tests. Returns the bound address.
pub async fn spawn_ephemeral(
    runs_dir: PathBuf,
) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let state = AppState::new(runs_dir);
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", 0)).await?;
    let addr = listener.local_addr()?;
    let app = router(state);
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!("server stopped: {e}");
        }
    });
    Ok((addr, handle))
}
