//! Thin HTTP client for the estimation service.

pub mod api;

use std::time::Duration;

use thiserror::Error;

use api::{
    ErrorBody, EstimateRequest, EstimateResponse, ExtractRequest, ExtractResponse, HealthResponse,
    MetricsRequest, MetricsResponse, RunListEntry, RunState, RunStatusResponse, SubmitRunRequest,
    SubmitRunResponse,
};
use prism_core::runs::AttributionReport;

/// Client-side failure: transport trouble or a structured service error.
#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),

    #[error("service error ({kind}): {message}")]
    Service { status: u16, kind: String, message: String },

    #[error("run {run_id} failed: {message}")]
    RunFailed { run_id: String, message: String },
}

impl ClientError {
    /// The service-reported error kind, when there is one.
    pub fn kind(&self) -> Option<&str> {
        match self {
            ClientError::Service { kind, .. } => Some(kind),
            ClientError::RunFailed { .. } => Some("oracle"),
            ClientError::Transport(_) => None,
        }
    }
}

pub type ClientResult<T> = Result<T, ClientError>;

/// HTTP client bound to one service base URL.
#[derive(Debug, Clone)]
pub struct PrismClient {
    base_url: String,
    http: reqwest::Client,
}

impl PrismClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        let base_url = base_url.into().trim_end_matches('/').to_string();
        PrismClient { base_url, http: reqwest::Client::new() }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    async fn decode<T: serde::de::DeserializeOwned>(
        response: reqwest::Response,
    ) -> ClientResult<T> {
        let status = response.status();
        if status.is_success() {
            return Ok(response.json().await?);
        }
        let body: ErrorBody = response.json().await.unwrap_or(ErrorBody {
            kind: "unknown".to_string(),
            message: format!("HTTP {status}"),
        });
        Err(ClientError::Service { status: status.as_u16(), kind: body.kind, message: body.message })
    }

    pub async fn health(&self) -> ClientResult<HealthResponse> {
        Self::decode(self.http.get(format!("{}/v1/health", self.base_url)).send().await?).await
    }

    pub async fn submit_run(&self, request: &SubmitRunRequest) -> ClientResult<SubmitRunResponse> {
        Self::decode(
            self.http.post(format!("{}/v1/runs", self.base_url)).json(request).send().await?,
        )
        .await
    }

    pub async fn run_status(&self, run_id: &str) -> ClientResult<RunStatusResponse> {
        Self::decode(
            self.http.get(format!("{}/v1/runs/{run_id}", self.base_url)).send().await?,
        )
        .await
    }

    pub async fn list_runs(&self) -> ClientResult<Vec<RunListEntry>> {
        Self::decode(self.http.get(format!("{}/v1/runs", self.base_url)).send().await?).await
    }

    /// Polls until the run completes or fails.
    pub async fn wait_for_run(
        &self,
        run_id: &str,
        poll: Duration,
    ) -> ClientResult<RunStatusResponse> {
        loop {
            let status = self.run_status(run_id).await?;
            match status.state {
                RunState::Completed => return Ok(status),
                RunState::Failed => {
                    return Err(ClientError::RunFailed {
                        run_id: run_id.to_string(),
                        message: status.error.unwrap_or_else(|| "unknown".to_string()),
                    })
                }
                RunState::Queued | RunState::Running => tokio::time::sleep(poll).await,
            }
        }
    }

    /// Raw predictions JSONL of a completed run.
    pub async fn predictions_jsonl(&self, run_id: &str) -> ClientResult<String> {
        let response = self
            .http
            .get(format!("{}/v1/runs/{run_id}/predictions", self.base_url))
            .send()
            .await?;
        let status = response.status();
        if status.is_success() {
            return Ok(response.text().await?);
        }
        let body: ErrorBody = response.json().await.unwrap_or(ErrorBody {
            kind: "unknown".to_string(),
            message: format!("HTTP {status}"),
        });
        Err(ClientError::Service { status: status.as_u16(), kind: body.kind, message: body.message })
    }

    pub async fn explain(&self, run_id: &str, instance_id: &str) -> ClientResult<AttributionReport> {
        Self::decode(
            self.http
                .get(format!("{}/v1/runs/{run_id}/explain/{instance_id}", self.base_url))
                .send()
                .await?,
        )
        .await
    }

    pub async fn metrics(&self, request: &MetricsRequest) -> ClientResult<MetricsResponse> {
        Self::decode(
            self.http.post(format!("{}/v1/metrics", self.base_url)).json(request).send().await?,
        )
        .await
    }

    pub async fn estimate(&self, request: &EstimateRequest) -> ClientResult<EstimateResponse> {
        Self::decode(
            self.http.post(format!("{}/v1/estimate", self.base_url)).json(request).send().await?,
        )
        .await
    }

    pub async fn extract(&self, request: &ExtractRequest) -> ClientResult<ExtractResponse> {
        Self::decode(
            self.http.post(format!("{}/v1/extract", self.base_url)).json(request).send().await?,
        )
        .await
    }
}
