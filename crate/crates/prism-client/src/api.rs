//! Wire types shared by the service and its clients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use prism_core::datasets::Dataset;
use prism_core::metrics::{BootstrapConfig, CalibrationConfig, MetricsReport};
use prism_core::runs::{
    AttributionReport, ExtractionOutput, ExtractionRequest, Method, OracleSpec, PredictionRecord,
    RunManifest, RunOptions,
};
use prism_core::shapley::ReconstructionResult;
use prism_core::types::Instance;

/// Task configuration, by server-side path or inline TOML text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toml: Option<String>,
}

/// Dataset, by server-side CSV path or inline rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<Dataset>,
    /// Balanced subsample size per class, applied after loading.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balance_per_class: Option<usize>,
    /// Seed for the balanced subsample.
    #[serde(default)]
    pub balance_seed: u64,
}

/// POST /v1/runs
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitRunRequest {
    #[serde(flatten)]
    pub method: Method,
    pub config: ConfigSource,
    pub dataset: DatasetSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demos: Option<DatasetSource>,
    pub oracle: OracleSpec,
    #[serde(default)]
    pub options: RunOptions,
    /// Execute even when a completed run with the same fingerprint exists.
    #[serde(default)]
    pub force_rerun: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Queued,
    Running,
    Completed,
    Failed,
}

/// Response to run submission.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitRunResponse {
    pub run_id: String,
    pub state: RunState,
    /// True when an existing completed run was reused.
    pub resumed: bool,
}

/// GET /v1/runs/{id}
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunStatusResponse {
    pub run_id: String,
    pub state: RunState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<RunManifest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<String>,
}

/// GET /v1/runs listing entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunListEntry {
    pub run_id: String,
    pub state: RunState,
}

/// One method's predictions for evaluation: either a completed run id or
/// inline JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsInputSource {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions_jsonl: Option<String>,
}

/// POST /v1/metrics
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRequest {
    pub inputs: Vec<MetricsInputSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<BTreeMap<String, usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsResponse {
    pub reports: Vec<MetricsReport>,
    pub comparison_csv: String,
    /// Reliability curve CSV per method, present when calibration was requested.
    #[serde(default)]
    pub curves_csv: BTreeMap<String, String>,
}

/// POST /v1/estimate — a one-off estimate for a single instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateRequest {
    #[serde(flatten)]
    pub method: Method,
    pub config: ConfigSource,
    pub instance: Instance,
    pub oracle: OracleSpec,
    #[serde(default)]
    pub options: RunOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateResponse {
    pub result: ReconstructionResult,
    pub report: AttributionReport,
}

/// POST /v1/extract
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractRequest {
    pub config: ConfigSource,
    pub extraction: ExtractionRequest,
    pub oracle: OracleSpec,
    #[serde(default)]
    pub options: RunOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractResponse {
    pub output: ExtractionOutput,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub version: String,
}

/// Error body returned by the service; `kind` mirrors the engine's error
/// taxonomy so clients can map failures to exit codes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

/// Maps an engine error onto (HTTP status, kind).
pub fn error_kind(error: &prism_core::Error) -> (u16, &'static str) {
    use prism_core::Error;
    match error {
        Error::Config(_) => (400, "config"),
        Error::Input(_) | Error::Size(_) => (400, "input"),
        Error::Ingest(_) => (400, "ingest"),
        Error::NotFound(_) => (404, "not_found"),
        Error::MetricUndefined(_) => (422, "metric_undefined"),
        Error::Query { .. }
        | Error::Transport { .. }
        | Error::Protocol(_)
        | Error::Parse { .. }
        | Error::Range(_) => (502, "oracle"),
        Error::Io(_) | Error::Json(_) => (500, "io"),
    }
}

/// Convenience re-exports so client users rarely need prism-core directly.
pub mod types {
    pub use prism_core::datasets::{Dataset, DatasetRow, Provenance};
    pub use prism_core::metrics::{BootstrapConfig, CalibrationConfig, MetricsReport};
    pub use prism_core::runs::{
        AttributionReport, ExtractionOutput, ExtractionRequest, Method, OracleSpec,
        PredictionRecord, RunManifest, RunOptions,
    };
    pub use prism_core::types::Instance;
}

pub use prism_core::runs::RunOutput;

/// Parses a predictions JSONL document.
pub fn predictions_from_jsonl(text: &str) -> Result<Vec<PredictionRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
