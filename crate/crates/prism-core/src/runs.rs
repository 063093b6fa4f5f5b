//! Run orchestration: execute an estimation method over a dataset, write the
//! run directory (manifest + predictions), join predictions with metrics,
//! render attribution reports, and drive repeated extraction.
//!
//! Run directories are content-addressed by the manifest fingerprint, so
//! re-running identical inputs resumes instead of silently overwriting.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{self, Demonstration};
use crate::datasets::{balanced_sample, Dataset, TaskConfig};
use crate::error::{Error, Result};
use crate::extraction::{
    extract_factor_summaries, fixed_aspects, propose_aspects, task_for_aspects, Aspect,
    AspectBounds, ExtractedFactor,
};
use crate::oracle::{
    CacheStats, CacheStore, CachedOracle, ChatCompletionsConfig, ChatCompletionsOracle,
    CountingOracle, DeterministicOracle, MulticlassModel, NoiseScope, NoisyLogitOracle, Oracle,
    OracleQuery, OracleResponse, ReplayOracle, SyntheticModel,
};
use crate::rng::substream;
use crate::shapley::{prism_estimate, ClampCounter, ReconstructionResult};
use crate::tabular::tabular_prism;
use crate::types::{FactorValue, Instance, TaskSpec};

// ── Method and oracle selection ───────────────────────────────────────

/// The estimation method of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Method {
    Prism,
    TabularPrism,
    NshotLevel { n: usize },
    NshotScore { n: usize },
    Contrast,
    Icl { positive: usize, negative: usize },
}

impl Method {
    pub fn id(&self) -> String {
        match self {
            Method::Prism => "prism".to_string(),
            Method::TabularPrism => "tabular-prism".to_string(),
            Method::NshotLevel { n } => format!("{n}shot-level"),
            Method::NshotScore { n } => format!("{n}shot-score"),
            Method::Contrast => "contrast".to_string(),
            Method::Icl { positive, negative } => format!("icl-{positive}+{negative}"),
        }
    }

    /// Whether the method produces per-factor attributions.
    pub fn attributes(&self) -> bool {
        matches!(self, Method::Prism | Method::TabularPrism)
    }
}

/// Which oracle backend a run talks to.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleSpec {
    /// Pure synthetic logit model.
    Deterministic { model: SyntheticModel },
    /// Synthetic model with per-class heads.
    Multiclass { models: MulticlassModel },
    /// Synthetic model plus seeded Gaussian logit noise.
    Noisy { model: SyntheticModel, noise_sd: f64, scope: NoiseScope, seed: u64 },
    /// Recorded transcript replay.
    Replay { transcript: PathBuf, model_id: String },
    /// Live chat-completions endpoint, optionally cached on disk.
    Chat {
        #[serde(flatten)]
        config: ChatCompletionsConfig,
        #[serde(default)]
        cache_file: Option<PathBuf>,
    },
}

impl OracleSpec {
    /// Builds the oracle; live backends additionally return their response
    /// cache so run manifests can record hit statistics.
    pub fn build(&self) -> Result<(Arc<dyn Oracle>, Option<Arc<CacheStore>>)> {
        Ok(match self {
            OracleSpec::Deterministic { model } => {
                (Arc::new(DeterministicOracle::new(model.clone())), None)
            }
            OracleSpec::Multiclass { models } => {
                (Arc::new(DeterministicOracle::multiclass(models.clone())), None)
            }
            OracleSpec::Noisy { model, noise_sd, scope, seed } => {
                (Arc::new(NoisyLogitOracle::new(model.clone(), *noise_sd, *scope, *seed)), None)
            }
            OracleSpec::Replay { transcript, model_id } => {
                (Arc::new(ReplayOracle::from_path(transcript, model_id.clone())?), None)
            }
            OracleSpec::Chat { config, cache_file } => {
                let chat = ChatCompletionsOracle::new(config.clone());
                let store = match cache_file {
                    Some(path) => Arc::new(CacheStore::open(path)?),
                    None => Arc::new(CacheStore::in_memory()),
                };
                (Arc::new(CachedOracle::new(chat, store.clone())), Some(store))
            }
        })
    }

    pub fn model_label(&self) -> String {
        match self {
            OracleSpec::Deterministic { .. } => "deterministic".to_string(),
            OracleSpec::Multiclass { .. } => "deterministic-multiclass".to_string(),
            OracleSpec::Noisy { .. } => "noisy-synthetic".to_string(),
            OracleSpec::Replay { model_id, .. } => model_id.clone(),
            OracleSpec::Chat { config, .. } => config.model.clone(),
        }
    }
}

/// Per-run knobs; defaults mirror the shipped configuration style.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOptions {
    #[serde(default)]
    pub seed: u64,
    /// Background samples per factor; falls back to the task's `k`.
    #[serde(default)]
    pub k: Option<usize>,
    /// Instance failures tolerated before the whole run aborts.
    #[serde(default)]
    pub max_failures: usize,
    /// Concurrent instances in flight.
    #[serde(default = "default_run_concurrency")]
    pub concurrency: usize,
    /// Route every query around the response cache.
    #[serde(default)]
    pub no_cache: bool,
    /// Overrides the task temperature when set.
    #[serde(default)]
    pub temperature: Option<f64>,
}

fn default_run_concurrency() -> usize {
    4
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed: 0,
            k: None,
            max_failures: 0,
            concurrency: default_run_concurrency(),
            no_cache: false,
            temperature: None,
        }
    }
}

/// Oracle adapter that forces the `no_cache` flag on every query.
struct NoCacheOracle<O>(O);

#[async_trait::async_trait]
impl<O: Oracle> Oracle for NoCacheOracle<O> {
    async fn evaluate(&self, query: &OracleQuery) -> Result<OracleResponse> {
        let mut query = query.clone();
        query.meta.no_cache = true;
        self.0.evaluate(&query).await
    }

    fn model_id(&self) -> &str {
        self.0.model_id()
    }
}

// ── Run artifacts ─────────────────────────────────────────────────────

/// One scored instance in `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance_id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_logit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_logit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<FactorValue>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phis: Option<Vec<PhiRecord>>,
}

/// Per-factor contribution stored with a prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiRecord {
    pub factor: String,
    pub phi: f64,
    pub k_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
}

/// An instance that failed and the error it failed with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceFailure {
    pub instance_id: String,
    pub error: String,
}

/// Everything a run records about itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Content fingerprint over config, dataset, method, seed, k, and model.
    pub run_id: String,
    pub task_id: String,
    pub method: String,
    pub model_id: String,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    pub seed: u64,
    pub k: usize,
    pub instance_count: usize,
    pub factor_count: usize,
    pub queries_issued: u64,
    pub row_evaluations: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_logit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_values: Option<Vec<FactorValue>>,
    pub cache: CacheStats,
    pub clamp_events: u64,
    pub clamp_total: u64,
    pub failures: Vec<InstanceFailure>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

/// A completed run: manifest plus ordered predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub predictions: Vec<PredictionRecord>,
}

impl RunOutput {
    pub fn predictions_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for record in &self.predictions {
            out.push_str(&serde_json::to_string(record)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn predictions_from_jsonl(text: &str) -> Result<Vec<PredictionRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Content fingerprint identifying a run; timestamps are excluded so
/// identical inputs always map to the same run directory.
pub fn run_fingerprint(
    config_fingerprint: &str,
    dataset_fingerprint: &str,
    method: &Method,
    model_id: &str,
    seed: u64,
    k: usize,
) -> String {
    let mut hasher = Sha256::new();
    for part in [
        config_fingerprint,
        dataset_fingerprint,
        &serde_json::to_string(method).expect("method serializes"),
        model_id,
        &seed.to_string(),
        &k.to_string(),
    ] {
        hasher.update(part.as_bytes());
        hasher.update([0xff]);
    }
    hex::encode(hasher.finalize())
}

// ── Run execution ─────────────────────────────────────────────────────

/// Request to execute one run. The demo dataset feeds ICL demonstrations and
/// must be disjoint from the evaluation dataset.
pub struct RunRequest {
    pub config: TaskConfig,
    pub dataset: Dataset,
    pub method: Method,
    pub oracle_spec: OracleSpec,
    pub options: RunOptions,
    pub demos: Option<Dataset>,
}

async fn score_instance<O: Oracle + ?Sized>(
    method: &Method,
    task: &TaskSpec,
    x: &Instance,
    instance_id: &str,
    base_logit: f64,
    k: usize,
    seed: u64,
    oracle: &O,
    clamps: &ClampCounter,
    demos: &[Demonstration],
) -> Result<PredictionRecord> {
    let mut record = PredictionRecord {
        instance_id: instance_id.to_string(),
        score: 0.0,
        true_label: x.label,
        base_logit: None,
        total_logit: None,
        values: None,
        phis: None,
    };
    match method {
        Method::Prism | Method::TabularPrism => {
            let result: ReconstructionResult = if matches!(method, Method::Prism) {
                prism_estimate(task, x, base_logit, oracle, k, seed, instance_id, clamps).await?
            } else {
                tabular_prism(task, x, base_logit, oracle, k, seed, instance_id, clamps).await?
            };
            record.score = result.probability;
            record.base_logit = Some(result.base_logit);
            record.total_logit = Some(result.total_logit);
            record.values = Some(x.values.clone());
            record.phis = Some(
                result
                    .contributions
                    .iter()
                    .map(|c| PhiRecord {
                        factor: c.factor.name.clone(),
                        phi: c.phi,
                        k_samples: c.k_samples,
                        std_error: c.std_error,
                    })
                    .collect(),
            );
        }
        Method::NshotLevel { n } => {
            record.score = baselines::nshot_level(oracle, task, x, *n, instance_id).await?;
        }
        Method::NshotScore { n } => {
            record.score = baselines::nshot_score(oracle, task, x, *n, instance_id).await?;
        }
        Method::Contrast => {
            record.score = baselines::contrast(oracle, task, x, instance_id).await?;
        }
        Method::Icl { .. } => {
            let mut rng = substream(seed, &[instance_id, "icl"]);
            record.score =
                baselines::icl(oracle, task, x, demos, &mut rng, instance_id).await?;
        }
    }
    Ok(record)
}

fn select_demos(
    request: &RunRequest,
    positive: usize,
    negative: usize,
) -> Result<Vec<Demonstration>> {
    let demo_set = request
        .demos
        .as_ref()
        .ok_or_else(|| Error::Config("icl needs a demonstration dataset".to_string()))?;
    let eval_ids: std::collections::HashSet<&str> =
        request.dataset.rows.iter().map(|r| r.id.as_str()).collect();
    if demo_set.rows.iter().any(|r| eval_ids.contains(r.id.as_str())) {
        return Err(Error::Config(
            "demonstration dataset overlaps the evaluation dataset".to_string(),
        ));
    }
    if positive != negative {
        return Err(Error::Config(
            "icl demonstrations must be balanced (positive == negative)".to_string(),
        ));
    }
    let mut rng = substream(request.options.seed, &["icl-demos"]);
    let balanced = balanced_sample(demo_set, positive, &mut rng)?;
    Ok(balanced
        .rows
        .into_iter()
        .map(|row| {
            let label = row.instance.label.unwrap_or(0);
            Demonstration::new(row.instance.values, label)
        })
        .collect())
}

/// Executes a run end to end and returns the ordered predictions plus the
/// manifest. Fails once instance failures exceed the configured budget.
pub async fn execute_run(request: &RunRequest) -> Result<RunOutput> {
    let task = {
        let mut t = request.config.spec.clone();
        if let Some(temperature) = request.options.temperature {
            t.temperature = temperature;
        }
        t
    };
    task.validate()?;
    let k = request.options.k.unwrap_or(task.k);
    let started_unix = unix_now();

    let (built, cache_store) = request.oracle_spec.build()?;
    let counting = Arc::new(CountingOracle::new(built));
    let oracle: Arc<dyn Oracle> = if request.options.no_cache {
        Arc::new(NoCacheOracle(counting.clone()))
    } else {
        counting.clone()
    };
    let clamps = ClampCounter::new();

    let demos = match &request.method {
        Method::Icl { positive, negative } => select_demos(request, *positive, *negative)?,
        _ => Vec::new(),
    };

    // base logit resolved once per run; only the attribution methods use it
    let base_logit = if request.method.attributes() {
        crate::datasets::resolve_base_logit(&task, oracle.as_ref(), &clamps).await?
    } else {
        0.0
    };

    let seed = request.options.seed;
    let runs: Vec<futures::future::BoxFuture<'_, (String, Result<PredictionRecord>)>> = request
        .dataset
        .rows
        .iter()
        .map(|row| {
            let task = &task;
            let oracle = oracle.clone();
            let method = &request.method;
            let clamps = &clamps;
            let demos = &demos;
            let run = async move {
                let outcome = score_instance(
                    method,
                    task,
                    &row.instance,
                    &row.id,
                    base_logit,
                    k,
                    seed,
                    oracle.as_ref(),
                    clamps,
                    demos,
                )
                .await;
                (row.id.clone(), outcome)
            };
            Box::pin(run) as futures::future::BoxFuture<'_, _>
        })
        .collect();
    let outcomes: Vec<(String, Result<PredictionRecord>)> =
        stream::iter(runs).buffered(request.options.concurrency.max(1)).collect().await;

    let mut predictions = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (instance_id, outcome) in outcomes {
        match outcome {
            Ok(record) => predictions.push(record),
            Err(e) => failures.push(InstanceFailure { instance_id, error: e.to_string() }),
        }
    }
    if failures.len() > request.options.max_failures {
        return Err(Error::query(
            format!(
                "{} instance failures exceed the budget of {}",
                failures.len(),
                request.options.max_failures
            ),
            failures
                .iter()
                .map(|f| format!("{}: {}", f.instance_id, f.error))
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }

    let cache = cache_store.map(|s| s.stats()).unwrap_or_default();
    let manifest = RunManifest {
        run_id: run_fingerprint(
            &request.config.fingerprint,
            &request.dataset.provenance.fingerprint,
            &request.method,
            &request.oracle_spec.model_label(),
            seed,
            k,
        ),
        task_id: task.id.clone(),
        method: request.method.id(),
        model_id: request.oracle_spec.model_label(),
        config_fingerprint: request.config.fingerprint.clone(),
        dataset_fingerprint: request.dataset.provenance.fingerprint.clone(),
        seed,
        k,
        instance_count: request.dataset.rows.len(),
        factor_count: task.factor_count(),
        queries_issued: counting.queries(),
        row_evaluations: counting.row_evaluations(),
        base_logit: request.method.attributes().then_some(base_logit),
        reference_values: task.reference.as_ref().map(|r| r.values.clone()),
        cache,
        clamp_events: clamps.clamped(),
        clamp_total: clamps.total(),
        failures,
        started_unix,
        finished_unix: unix_now(),
    };
    Ok(RunOutput { manifest, predictions })
}

/// Writes `manifest.json` and `predictions.jsonl` under
/// `<runs_dir>/<run id prefix>/`; returns the run directory.
pub fn write_run_dir(output: &RunOutput, runs_dir: &Path) -> Result<PathBuf> {
    let dir = runs_dir.join(&output.manifest.run_id[..16.min(output.manifest.run_id.len())]);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&output.manifest)?)?;
    std::fs::write(dir.join("predictions.jsonl"), output.predictions_jsonl()?)?;
    Ok(dir)
}

/// Loads a previously written run directory.
pub fn load_run_dir(dir: &Path) -> Result<RunOutput> {
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let predictions =
        RunOutput::predictions_from_jsonl(&std::fs::read_to_string(dir.join("predictions.jsonl"))?)?;
    Ok(RunOutput { manifest, predictions })
}

/// Finds an existing run directory for a fingerprint, for resume-on-rerun.
pub fn find_run_dir(runs_dir: &Path, run_id: &str) -> Option<PathBuf> {
    let dir = runs_dir.join(&run_id[..16.min(run_id.len())]);
    (dir.join("manifest.json").exists() && dir.join("predictions.jsonl").exists()).then_some(dir)
}

// ── Attribution reports ───────────────────────────────────────────────

/// One factor line of an attribution report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorAttribution {
    pub factor: String,
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_value: Option<String>,
    pub phi: f64,
    pub k_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
}

/// The reconstruction ledger for one instance, renderable as text or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub instance_id: String,
    pub method: String,
    pub factors: Vec<FactorAttribution>,
    pub base_logit: f64,
    pub contribution_sum: f64,
    pub total_logit: f64,
    pub probability: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<usize>,
}

impl AttributionReport {
    /// Aligned-column text rendering of the ledger.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<(String, String, String, String)> = vec![(
            "Factor".to_string(),
            "Value".to_string(),
            "Reference".to_string(),
            "Shapley".to_string(),
        )];
        for f in &self.factors {
            rows.push((
                f.factor.clone(),
                f.value.clone(),
                f.reference_value.clone().unwrap_or_else(|| "-".to_string()),
                format!("{:+.3}", f.phi),
            ));
        }
        let widths = rows.iter().fold([0usize; 4], |mut w, r| {
            w[0] = w[0].max(r.0.len());
            w[1] = w[1].max(r.1.len());
            w[2] = w[2].max(r.2.len());
            w[3] = w[3].max(r.3.len());
            w
        });
        let mut out = String::new();
        for (i, r) in rows.iter().enumerate() {
            out.push_str(&format!(
                "{:<w0$}  {:<w1$}  {:<w2$}  {:>w3$}\n",
                r.0,
                r.1,
                r.2,
                r.3,
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            ));
            if i == 0 {
                out.push_str(&format!("{}\n", "-".repeat(widths.iter().sum::<usize>() + 6)));
            }
        }
        out.push_str(&format!(
            "\nBase logit      {:+.4}\nSum Shapley     {:+.4}\nTotal logit     {:+.4}\nProbability     {:.3}\n",
            self.base_logit, self.contribution_sum, self.total_logit, self.probability
        ));
        if let Some(label) = self.true_label {
            out.push_str(&format!("True label      {label}\n"));
        }
        out
    }
}

/// Builds an attribution report directly from a fresh reconstruction.
pub fn attribution_report_from_result(
    task: &TaskSpec,
    instance_id: &str,
    x: &Instance,
    result: &ReconstructionResult,
    method: &str,
) -> AttributionReport {
    let reference = task.reference.as_ref();
    let factors = result
        .contributions
        .iter()
        .map(|c| FactorAttribution {
            factor: c.factor.name.clone(),
            value: x
                .values
                .get(c.factor.index)
                .map(|v| v.render())
                .unwrap_or_else(|| "-".to_string()),
            reference_value: reference
                .and_then(|r| r.values.get(c.factor.index).map(|v| v.render())),
            phi: c.phi,
            k_samples: c.k_samples,
            std_error: c.std_error,
        })
        .collect::<Vec<_>>();
    let contribution_sum = factors.iter().map(|f| f.phi).sum();
    AttributionReport {
        instance_id: instance_id.to_string(),
        method: method.to_string(),
        factors,
        base_logit: result.base_logit,
        contribution_sum,
        total_logit: result.total_logit,
        probability: result.probability,
        true_label: x.label,
    }
}

/// Builds the attribution report for one instance of a stored run.
pub fn explain_instance(output: &RunOutput, instance_id: &str) -> Result<AttributionReport> {
    let record = output
        .predictions
        .iter()
        .find(|p| p.instance_id == instance_id)
        .ok_or_else(|| Error::NotFound(format!("instance {instance_id} not in this run")))?;
    let phis = record
        .phis
        .as_ref()
        .ok_or_else(|| Error::input("this run's method records no attributions"))?;
    let values = record.values.clone().unwrap_or_default();
    let reference = output.manifest.reference_values.clone();

    let factors = phis
        .iter()
        .enumerate()
        .map(|(i, phi)| FactorAttribution {
            factor: phi.factor.clone(),
            value: values.get(i).map(|v| v.render()).unwrap_or_else(|| "-".to_string()),
            reference_value: reference.as_ref().and_then(|r| r.get(i).map(|v| v.render())),
            phi: phi.phi,
            k_samples: phi.k_samples,
            std_error: phi.std_error,
        })
        .collect::<Vec<_>>();
    let contribution_sum: f64 = factors.iter().map(|f| f.phi).sum();
    let base_logit = record.base_logit.unwrap_or(0.0);
    Ok(AttributionReport {
        instance_id: instance_id.to_string(),
        method: output.manifest.method.clone(),
        factors,
        base_logit,
        contribution_sum,
        total_logit: record.total_logit.unwrap_or(base_logit + contribution_sum),
        probability: record.score,
        true_label: record.true_label,
    })
}

// ── Metrics over stored predictions ───────────────────────────────────

/// Predictions of one method, ready for evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodPredictions {
    pub method: String,
    pub records: Vec<PredictionRecord>,
}

/// Joins predictions with labels (embedded, or an external id → label map)
/// and computes the metrics report. Join mismatches list the orphaned ids.
pub fn evaluate_predictions(
    input: &MethodPredictions,
    labels: Option<&std::collections::BTreeMap<String, usize>>,
    calibration: Option<&crate::metrics::CalibrationConfig>,
    bootstrap: Option<crate::metrics::BootstrapConfig>,
) -> Result<crate::metrics::MetricsReport> {
    let mut data = Vec::with_capacity(input.records.len());
    let mut orphans = Vec::new();
    for record in &input.records {
        let label = match labels {
            Some(map) => map.get(&record.instance_id).copied(),
            None => record.true_label,
        };
        match label {
            Some(label) if label <= 1 => {
                data.push(crate::metrics::ScoredLabel::new(record.score, label as u8));
            }
            Some(label) => {
                return Err(Error::input(format!(
                    "instance {} has non-binary label {label}",
                    record.instance_id
                )))
            }
            None => orphans.push(record.instance_id.clone()),
        }
    }
    if let Some(map) = labels {
        let predicted: std::collections::HashSet<&str> =
            input.records.iter().map(|r| r.instance_id.as_str()).collect();
        orphans.extend(
            map.keys().filter(|id| !predicted.contains(id.as_str())).cloned(),
        );
    }
    if !orphans.is_empty() {
        return Err(Error::input(format!(
            "prediction/label join failed; orphaned ids: {}",
            orphans.join(", ")
        )));
    }
    crate::metrics::compute_report(&input.method, &data, calibration, bootstrap)
}

/// One CSV comparison table across methods.
pub fn comparison_csv(reports: &[crate::metrics::MetricsReport]) -> String {
    let mut out = String::from("method,instances,auroc,auprc,best_f1,f1_threshold,ece\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.method,
            r.instances,
            r.auroc,
            r.auprc,
            r.best_f1,
            r.f1_threshold,
            r.ece.map(|e| format!("{e:.6}")).unwrap_or_default()
        ));
    }
    out
}

// ── Repeated extraction runs ──────────────────────────────────────────

/// Outcome of one extraction repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRepeat {
    pub repeat: usize,
    pub factors: Vec<ExtractedFactor>,
    pub probability: f64,
    pub base_logit: f64,
    pub total_logit: f64,
    pub phis: Vec<PhiRecord>,
}

/// Aggregate of an extraction run: per-repeat results plus mean and spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionOutput {
    pub repeats: Vec<ExtractionRepeat>,
    pub mean_probability: f64,
    /// Sample standard deviation across repeats; absent for a single repeat.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability_spread: Option<f64>,
}

/// Extraction settings for a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractionRequest {
    pub task_description: String,
    pub context: String,
    #[serde(default)]
    pub fixed_aspects: Option<Vec<Aspect>>,
    #[serde(default)]
    pub bounds: Option<AspectBounds>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub permissive: bool,
}

fn default_repeats() -> usize {
    1
}

/// Repeats extraction + estimation, averaging the estimates. Each repeat gets
/// a distinct nonce so live oracles re-sample while transcripts replay.
pub async fn run_extraction<O: Oracle + ?Sized>(
    oracle: &O,
    base_task: &TaskSpec,
    request: &ExtractionRequest,
    k: usize,
    seed: u64,
    clamps: &ClampCounter,
) -> Result<ExtractionOutput> {
    if request.repeats == 0 {
        return Err(Error::input("repeats must be at least 1"));
    }
    let bounds = request.bounds.unwrap_or_default();
    let mut repeats = Vec::with_capacity(request.repeats);
    for repeat in 0..request.repeats {
        let nonce = (request.repeats > 1).then_some(repeat as u64);
        let aspects = match &request.fixed_aspects {
            Some(list) => fixed_aspects(list.clone(), &bounds)?,
            None => {
                propose_aspects(
                    oracle,
                    &request.task_description,
                    &request.context,
                    &bounds,
                    base_task,
                    nonce,
                )
                .await?
            }
        };
        let factors = extract_factor_summaries(
            oracle,
            &request.task_description,
            &request.context,
            &aspects,
            base_task,
            request.permissive,
            nonce,
        )
        .await?;
        let task = task_for_aspects(base_task, &aspects);
        let x = Instance::new(factors.iter().map(|f| f.summary.clone()).collect());
        let base_logit = crate::datasets::resolve_base_logit(&task, oracle, clamps).await?;
        let instance_id = format!("extract-{repeat}");
        let result =
            prism_estimate(&task, &x, base_logit, oracle, k, seed, &instance_id, clamps).await?;
        repeats.push(ExtractionRepeat {
            repeat,
            factors,
            probability: result.probability,
            base_logit: result.base_logit,
            total_logit: result.total_logit,
            phis: result
                .contributions
                .iter()
                .map(|c| PhiRecord {
                    factor: c.factor.name.clone(),
                    phi: c.phi,
                    k_samples: c.k_samples,
                    std_error: c.std_error,
                })
                .collect(),
        });
    }
    let mean_probability =
        repeats.iter().map(|r| r.probability).sum::<f64>() / repeats.len() as f64;
    let probability_spread = (repeats.len() > 1).then(|| {
        let var = repeats
            .iter()
            .map(|r| (r.probability - mean_probability).powi(2))
            .sum::<f64>()
            / (repeats.len() as f64 - 1.0);
        var.sqrt()
    });
    Ok(ExtractionOutput { repeats, mean_probability, probability_spread })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{DatasetRow, Provenance};
    use crate::types::TaskSpec;

    fn synthetic_config(m: usize) -> TaskConfig {
        let mut spec = TaskSpec::synthetic("syn", m);
        spec.reference = Some(crate::types::ReferenceInstance::new(
            (0..m).map(|_| FactorValue::numeric(0.0)).collect(),
        ));
        TaskConfig { spec, data: None, fingerprint: "test-config".to_string() }
    }

    fn synthetic_dataset(n: usize, m: usize) -> Dataset {
        let rows = (0..n)
            .map(|i| DatasetRow {
                id: format!("row-{i}"),
                instance: Instance::with_label(
                    (0..m).map(|j| FactorValue::numeric((i * m + j) as f64 / 10.0)).collect(),
                    usize::from(i % 2 == 0),
                ),
            })
            .collect();
        Dataset {
            rows,
            provenance: Provenance { source: "synthetic".to_string(), fingerprint: "ds".to_string() },
        }
    }

    fn request(method: Method, m: usize, n: usize) -> RunRequest {
        RunRequest {
            config: synthetic_config(m),
            dataset: synthetic_dataset(n, m),
            method,
            oracle_spec: OracleSpec::Deterministic {
                model: SyntheticModel::additive(0.0, (0..m).map(|j| 0.1 * j as f64).collect()),
            },
            options: RunOptions { seed: 7, ..Default::default() },
            demos: None,
        }
    }

    #[tokio::test]
    async fn tabular_run_records_query_accounting_and_phis() {
        let output = execute_run(&request(Method::TabularPrism, 3, 4)).await.unwrap();
        assert_eq!(output.manifest.factor_count, 3);
        assert_eq!(output.manifest.instance_count, 4);
        // one query per factor per instance at the default row limit
        assert_eq!(output.manifest.queries_issued, 3 * 4);
        assert_eq!(output.manifest.row_evaluations, (3 * 2 * 10 * 4) as u64);
        for record in &output.predictions {
            let phis = record.phis.as_ref().unwrap();
            assert_eq!(phis.len(), 3);
            let sum: f64 = phis.iter().map(|p| p.phi).sum();
            let total = record.total_logit.unwrap();
            let base = record.base_logit.unwrap();
            assert!((total - (base + sum)).abs() < 1e-12);
        }
    }

    #[tokio::test]
    async fn reruns_are_byte_identical(){
        let first = execute_run(&request(Method::TabularPrism, 3, 4)).await.unwrap();
        let second = execute_run(&request(Method::TabularPrism, 3, 4)).await.unwrap();
        assert_eq!(first.predictions_jsonl().unwrap(), second.predictions_jsonl().unwrap());
        assert_eq!(first.manifest.run_id, second.manifest.run_id);
    }

    #[tokio::test]
    async fn run_dirs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let output = execute_run(&request(Method::NshotScore { n: 1 }, 2, 3)).await.unwrap();
        let run_dir = write_run_dir(&output, dir.path()).unwrap();
        assert!(find_run_dir(dir.path(), &output.manifest.run_id).is_some());
        let loaded = load_run_dir(&run_dir).unwrap();
        assert_eq!(loaded, output);
    }

    #[tokio::test]
    async fn explain_renders_the_reconstruction_ledger() {
        let output = execute_run(&request(Method::TabularPrism, 3, 2)).await.unwrap();
        let report = explain_instance(&output, "row-1").unwrap();
        assert_eq!(report.factors.len(), 3);
        assert!((report.total_logit - (report.base_logit + report.contribution_sum)).abs() < 1e-12);
        let text = report.to_text();
        assert!(text.contains("Sum Shapley"));
        assert!(text.contains("Probability"));
        // JSON round-trip preserves the report
        let json = serde_json::to_string(&report).unwrap();
        let back: AttributionReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        assert!(matches!(explain_instance(&output, "missing"), Err(Error::NotFound(_))));
    }

    #[tokio::test]
    async fn failure_budget_aborts_runs() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        let mut req = request(Method::NshotScore { n: 1 }, 2, 3);
        // an empty transcript fails every instance
        req.oracle_spec =
            OracleSpec::Replay { transcript: empty.clone(), model_id: "m".to_string() };
        let err = execute_run(&req).await.unwrap_err();
        assert!(err.to_string().contains("exceed the budget"));

        // a generous budget lets the run finish with recorded failures
        req.options.max_failures = 10;
        let output = execute_run(&req).await.unwrap();
        assert_eq!(output.manifest.failures.len(), 3);
        assert!(output.predictions.is_empty());
    }

    #[tokio::test]
    async fn evaluate_predictions_joins_and_reports() {
        let output = execute_run(&request(Method::TabularPrism, 3, 4)).await.unwrap();
        let input = MethodPredictions {
            method: output.manifest.method.clone(),
            records: output.predictions.clone(),
        };
        let report = evaluate_predictions(&input, None, None, None).unwrap();
        assert_eq!(report.instances, 4);

        // external labels with an orphan
        let mut labels = std::collections::BTreeMap::new();
        labels.insert("row-0".to_string(), 1usize);
        let err = evaluate_predictions(&input, Some(&labels), None, None).unwrap_err();
        assert!(err.to_string().contains("row-1"));
    }

    #[tokio::test]
    async fn icl_requires_disjoint_demos() {
        let mut req = request(Method::Icl { positive: 1, negative: 1 }, 2, 4);
        req.demos = Some(synthetic_dataset(4, 2)); // same ids as eval
        let err = execute_run(&req).await.unwrap_err();
        assert!(err.to_string().contains("overlaps"));
    }

    #[tokio::test]
    async fn extraction_runs_aggregate_repeats() {
        use crate::oracle::ScriptedOracle;
        // two repeats, fixed aspects, 1 factor each; scripted summaries + scores
        let responses = vec![
            // repeat 0: summary, then K=1 comparative answers (2 probabilities)
            "Answer: strong demand".to_string(),
            "Answer: [0.7, 0.5]".to_string(),
            // repeat 1
            "Answer: weak demand".to_string(),
            "Answer: [0.6, 0.5]".to_string(),
        ];
        let oracle = ScriptedOracle::new(responses);
        let base_task = TaskSpec::synthetic("ex", 1);
        let request = ExtractionRequest {
            task_description: "will the price rise".to_string(),
            context: "the market context".to_string(),
            fixed_aspects: Some(vec![Aspect {
                name: "demand".to_string(),
                description: "demand outlook".to_string(),
            }]),
            bounds: Some(AspectBounds { min: 1, max: 12 }),
            repeats: 2,
            permissive: false,
        };
        let clamps = ClampCounter::new();
        let output = run_extraction(&oracle, &base_task, &request, 1, 3, &clamps).await.unwrap();
        assert_eq!(output.repeats.len(), 2);
        assert!(output.probability_spread.is_some());
        let mean = (output.repeats[0].probability + output.repeats[1].probability) / 2.0;
        assert!((output.mean_probability - mean).abs() < 1e-12);
    }
}
