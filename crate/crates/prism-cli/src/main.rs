//! Command-line front end. Every command is a client of the HTTP service:
//! either a remote one (`--server`) or an embedded instance spun up on an
//! ephemeral local port for the duration of the command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use prism_client::api::{
    ConfigSource, DatasetSource, ExtractRequest, MetricsInputSource, MetricsRequest,
    SubmitRunRequest,
};
use prism_client::{ClientError, PrismClient};
use prism_core::metrics::{BootstrapConfig, CalibrationConfig};
use prism_core::runs::{ExtractionRequest, Method, OracleSpec, RunOptions};

// ── Exit codes ────────────────────────────────────────────────────────
// 0 success, 2 config error, 3 oracle/transport failure budget exceeded,
// 4 metric undefined, 1 anything else.

fn exit_code_for(error: &anyhow::Error) -> u8 {
    if let Some(client) = error.downcast_ref::<ClientError>() {
        return match client.kind() {
            Some("config") | Some("input") | Some("ingest") => 2,
            Some("oracle") => 3,
            Some("metric_undefined") => 4,
            _ => 1,
        };
    }
    if error.downcast_ref::<ConfigArgError>().is_some() {
        return 2;
    }
    1
}

/// Local argument validation failures map to the config exit code.
#[derive(Debug)]
struct ConfigArgError(String);

impl std::fmt::Display for ConfigArgError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigArgError {}

fn config_err(message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigArgError(message.into()))
}

// ── CLI definition ────────────────────────────────────────────────────

/// Shapley-based probability reconstruction over an evaluation oracle.
#[derive(Parser)]
#[command(name = "prism", version, about)]
struct Cli {
    /// Base URL of a running service; omitted means an embedded instance.
    #[arg(long, global = true)]
    server: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start the HTTP service.
    Serve(ServeArgs),
    /// Execute an estimation method over a dataset.
    Run(RunArgs),
    /// Evaluate stored predictions: AUROC/AUPRC/F1 and reliability curves.
    Metrics(MetricsArgs),
    /// Render the attribution ledger for one instance of a run.
    Explain(ExplainArgs),
    /// Extract factors from a context and estimate over them, with repeats.
    Extract(ExtractArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8391")]
    addr: std::net::SocketAddr,
    /// Directory for run artifacts.
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
}

#[derive(Args, Clone)]
struct OracleArgs {
    /// Oracle spec as inline JSON or @path to a JSON file.
    #[arg(long)]
    oracle_spec: Option<String>,
    /// Chat-completions endpoint URL (alternative to --oracle-spec).
    #[arg(long)]
    endpoint: Option<String>,
    /// Model id for the chat oracle.
    #[arg(long)]
    model: Option<String>,
    /// Response cache file for the chat oracle.
    #[arg(long)]
    cache_file: Option<PathBuf>,
    /// Replay transcript path (alternative to --oracle-spec).
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Model id recorded in the transcript digests.
    #[arg(long, default_value = "recorded")]
    transcript_model: String,
}

impl OracleArgs {
    fn resolve(&self) -> anyhow::Result<OracleSpec> {
        if let Some(raw) = &self.oracle_spec {
            let text = match raw.strip_prefix('@') {
                Some(path) => std::fs::read_to_string(path)
                    .map_err(|e| config_err(format!("cannot read oracle spec {path}: {e}")))?,
                None => raw.clone(),
            };
            return serde_json::from_str(&text)
                .map_err(|e| config_err(format!("oracle spec parse error: {e}")));
        }
        if let Some(transcript) = &self.transcript {
            return Ok(OracleSpec::Replay {
                transcript: transcript.clone(),
                model_id: self.transcript_model.clone(),
            });
        }
        if let (Some(endpoint), Some(model)) = (&self.endpoint, &self.model) {
            return Ok(OracleSpec::Chat {
                config: prism_core::oracle::ChatCompletionsConfig {
                    endpoint: endpoint.clone(),
                    model: model.clone(),
                    credential_env: "PRISM_API_KEY".to_string(),
                    max_retries: 3,
                    concurrency: 4,
                    backoff_ms: 250,
                },
                cache_file: self.cache_file.clone(),
            });
        }
        Err(config_err(
            "an oracle is required: --oracle-spec, --transcript, or --endpoint with --model",
        ))
    }
}

#[derive(Args, Clone)]
struct RunOptionArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Background samples per factor (defaults to the task config's k).
    #[arg(long)]
    k: Option<usize>,
    /// Instance failures tolerated before the run aborts.
    #[arg(long, default_value_t = 0)]
    max_failures: usize,
    /// Concurrent instances in flight.
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Bypass the response cache for every query.
    #[arg(long)]
    no_cache: bool,
    /// Override the task temperature.
    #[arg(long)]
    temperature: Option<f64>,
}

impl RunOptionArgs {
    fn resolve(&self) -> RunOptions {
        RunOptions {
            seed: self.seed,
            k: self.k,
            max_failures: self.max_failures,
            concurrency: self.concurrency,
            no_cache: self.no_cache,
            temperature: self.temperature,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Method: prism, tabular-prism, nshot-level, nshot-score, contrast, icl.
    #[arg(long)]
    method: String,
    /// Shots for the n-shot methods.
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Positive demonstrations for icl.
    #[arg(long, default_value_t = 5)]
    icl_positive: usize,
    /// Negative demonstrations for icl.
    #[arg(long, default_value_t = 5)]
    icl_negative: usize,
    /// Task config TOML.
    #[arg(long)]
    config: PathBuf,
    /// Dataset CSV.
    #[arg(long)]
    dataset: PathBuf,
    /// Demonstration dataset CSV (icl only), disjoint from the evaluation data.
    #[arg(long)]
    demos: Option<PathBuf>,
    /// Balanced subsample size per class.
    #[arg(long)]
    balance: Option<usize>,
    #[arg(long, default_value_t = 0)]
    balance_seed: u64,
    /// Runs directory (embedded mode) / local artifact directory (remote mode).
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Execute even when an identical completed run exists.
    #[arg(long)]
    force_rerun: bool,
    #[command(flatten)]
    oracle: OracleArgs,
    #[command(flatten)]
    options: RunOptionArgs,
}

fn parse_method(args: &RunArgs) -> anyhow::Result<Method> {
    Ok(match args.method.as_str() {
        "prism" => Method::Prism,
        "tabular-prism" => Method::TabularPrism,
        "nshot-level" => Method::NshotLevel { n: args.n },
        "nshot-score" => Method::NshotScore { n: args.n },
        "contrast" => Method::Contrast,
        "icl" => Method::Icl { positive: args.icl_positive, negative: args.icl_negative },
        other => return Err(config_err(format!("unknown method {other:?}"))),
    })
}

#[derive(Args)]
struct MetricsArgs {
    /// Prediction input as METHOD=PATH; repeatable.
    #[arg(long = "input", value_name = "METHOD=PATH")]
    inputs: Vec<String>,
    /// Completed run id on the service; repeatable.
    #[arg(long = "run-id")]
    run_ids: Vec<String>,
    /// Runs directory for embedded mode.
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    /// External labels file (JSON object or CSV instance_id,label).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Reliability-curve bin count.
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Positive rate of the evaluation split.
    #[arg(long)]
    eval_rate: Option<f64>,
    /// Target population positive rate.
    #[arg(long)]
    population_rate: Option<f64>,
    /// Bootstrap resamples for standard errors (0 disables).
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    bootstrap_seed: u64,
    /// Output directory for report files.
    #[arg(long, default_value = "metrics-out")]
    out: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    /// A local run directory (manifest.json + predictions.jsonl).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// A run id on the service.
    #[arg(long)]
    run_id: Option<String>,
    /// Runs directory for embedded mode with --run-id.
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    /// Instance to explain.
    #[arg(long)]
    instance: String,
    /// Emit JSON instead of the text ledger.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ExtractArgs {
    /// Task config TOML.
    #[arg(long)]
    config: PathBuf,
    /// Plain-text context file.
    #[arg(long)]
    context: PathBuf,
    /// Question/task description for the extractor.
    #[arg(long)]
    task_description: String,
    /// Extraction + estimation repeats.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Fixed aspect list as JSON `[{"name":..,"description":..}]` or @path.
    #[arg(long)]
    aspects: Option<String>,
    /// Smallest acceptable aspect count.
    #[arg(long, default_value_t = 3)]
    min_aspects: usize,
    /// Largest acceptable aspect count.
    #[arg(long, default_value_t = 12)]
    max_aspects: usize,
    /// Tolerate per-aspect failures by degrading them to "no information".
    #[arg(long)]
    permissive: bool,
    /// Output directory for per-repeat factor and estimate files.
    #[arg(long, default_value = "extract-out")]
    out: PathBuf,
    #[command(flatten)]
    oracle: OracleArgs,
    #[command(flatten)]
    options: RunOptionArgs,
}

// ── Client plumbing ───────────────────────────────────────────────────

/// A client plus the embedded server handle keeping it alive.
struct Session {
    client: PrismClient,
    _embedded: Option<tokio::task::JoinHandle<()>>,
    embedded: bool,
}

async fn connect(server: &Option<String>, runs_dir: &Path) -> anyhow::Result<Session> {
    match server {
        Some(url) => Ok(Session {
            client: PrismClient::new(url.clone()),
            _embedded: None,
            embedded: false,
        }),
        None => {
            std::fs::create_dir_all(runs_dir)?;
            let (addr, handle) = prism_server::spawn_ephemeral(runs_dir.to_path_buf()).await?;
            Ok(Session {
                client: PrismClient::new(format!("http://{addr}")),
                _embedded: Some(handle),
                embedded: true,
            })
        }
    }
}

fn read_labels(path: &Path) -> anyhow::Result<BTreeMap<String, usize>> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        return Ok(serde_json::from_str(&text)?);
    }
    let mut labels = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.to_lowercase().starts_with("instance_id")) {
            continue;
        }
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| config_err(format!("labels line {} is not `id,label`", i + 1)))?;
        labels.insert(id.trim().to_string(), label.trim().parse()?);
    }
    Ok(labels)
}

// ── Commands ──────────────────────────────────────────────────────────

async fn cmd_run(cli_server: Option<String>, args: RunArgs) -> anyhow::Result<()> {
    let method = parse_method(&args)?;
    let oracle = args.oracle.resolve()?;
    let session = connect(&cli_server, &args.out).await?;

    let canonical = |p: &Path| -> anyhow::Result<String> {
        Ok(p.canonicalize().unwrap_or_else(|_| p.to_path_buf()).display().to_string())
    };
    let request = SubmitRunRequest {
        method,
        config: ConfigSource { path: Some(canonical(&args.config)?), toml: None },
        dataset: DatasetSource {
            csv_path: Some(canonical(&args.dataset)?),
            inline: None,
            balance_per_class: args.balance,
            balance_seed: args.balance_seed,
        },
        demos: match &args.demos {
            Some(path) => Some(DatasetSource {
                csv_path: Some(canonical(path)?),
                inline: None,
                balance_per_class: None,
                balance_seed: 0,
            }),
            None => None,
        },
        oracle,
        options: args.options.resolve(),
        force_rerun: args.force_rerun,
    };

    let submitted = session.client.submit_run(&request).await?;
    if submitted.resumed {
        println!("resumed completed run {}", submitted.run_id);
    } else {
        println!("submitted run {}", submitted.run_id);
    }
    let poll = if session.embedded { Duration::from_millis(100) } else { Duration::from_secs(2) };
    let status = session.client.wait_for_run(&submitted.run_id, poll).await?;
    let manifest = status.manifest.expect("completed run has a manifest");

    let run_dir = if session.embedded {
        PathBuf::from(status.run_dir.expect("embedded run dir"))
    } else {
        // materialize the artifacts locally
        let dir = args.out.join(&manifest.run_id[..16]);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        let predictions = session.client.predictions_jsonl(&manifest.run_id).await?;
        std::fs::write(dir.join("predictions.jsonl"), predictions)?;
        dir
    };

    println!("run directory: {}", run_dir.display());
    println!(
        "instances: {}  factors: {}  queries: {}  row evaluations: {}",
        manifest.instance_count,
        manifest.factor_count,
        manifest.queries_issued,
        manifest.row_evaluations
    );
    if manifest.clamp_events > 0 {
        println!(
            "probability clamps: {} of {} logit conversions",
            manifest.clamp_events, manifest.clamp_total
        );
    }
    if !manifest.failures.is_empty() {
        println!("instance failures: {}", manifest.failures.len());
        for failure in &manifest.failures {
            println!("  {}: {}", failure.instance_id, failure.error);
        }
    }
    Ok(())
}

async fn cmd_metrics(cli_server: Option<String>, args: MetricsArgs) -> anyhow::Result<()> {
    let session = connect(&cli_server, &args.runs_dir).await?;

    let mut inputs = Vec::new();
    for pair in &args.inputs {
        let (method, path) = pair
            .split_once('=')
            .ok_or_else(|| config_err(format!("--input {pair:?} is not METHOD=PATH")))?;
        let jsonl = std::fs::read_to_string(path)?;
        inputs.push(MetricsInputSource {
            method: method.to_string(),
            run_id: None,
            predictions_jsonl: Some(jsonl),
        });
    }
    for run_id in &args.run_ids {
        let status = session.client.run_status(run_id).await?;
        let method = status
            .manifest
            .map(|m| m.method)
            .unwrap_or_else(|| "unknown".to_string());
        inputs.push(MetricsInputSource {
            method,
            run_id: Some(run_id.clone()),
            predictions_jsonl: None,
        });
    }
    if inputs.is_empty() {
        return Err(config_err("metrics needs at least one --input or --run-id"));
    }

    let calibration = match (args.eval_rate, args.population_rate) {
        (Some(eval), Some(population)) => Some(CalibrationConfig {
            bins: args.bins,
            eval_positive_rate: eval,
            population_positive_rate: population,
        }),
        (None, None) => None,
        _ => return Err(config_err("calibration needs both --eval-rate and --population-rate")),
    };
    let request = MetricsRequest {
        inputs,
        labels: match &args.labels {
            Some(path) => Some(read_labels(path)?),
            None => None,
        },
        calibration,
        bootstrap: (args.bootstrap > 0).then_some(BootstrapConfig {
            resamples: args.bootstrap,
            seed: args.bootstrap_seed,
        }),
    };
    let response = session.client.metrics(&request).await?;

    std::fs::create_dir_all(&args.out)?;
    for report in &response.reports {
        let path = args.out.join(format!("report-{}.json", report.method));
        std::fs::write(&path, serde_json::to_string_pretty(report)?)?;
        println!(
            "{}: AUROC {:.3}  AUPRC {:.3}  best F1 {:.3} (threshold {:.3}){}",
            report.method,
            report.auroc,
            report.auprc,
            report.best_f1,
            report.f1_threshold,
            report.ece.map(|e| format!("  ECE {e:.4}")).unwrap_or_default()
        );
    }
    std::fs::write(args.out.join("comparison.csv"), &response.comparison_csv)?;
    for (method, csv) in &response.curves_csv {
        std::fs::write(args.out.join(format!("curve-{method}.csv")), csv)?;
    }
    println!("reports written to {}", args.out.display());
    Ok(())
}

async fn cmd_explain(cli_server: Option<String>, args: ExplainArgs) -> anyhow::Result<()> {
    let (runs_dir, run_id) = match (&args.run_dir, &args.run_id) {
        (Some(dir), _) => {
            let output = prism_core::runs::load_run_dir(dir)
                .map_err(|e| config_err(format!("cannot load run dir: {e}")))?;
            let parent = dir.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
            (parent, output.manifest.run_id)
        }
        (None, Some(id)) => (args.runs_dir.clone(), id.clone()),
        (None, None) => return Err(config_err("explain needs --run-dir or --run-id")),
    };
    let session = connect(&cli_server, &runs_dir).await?;
    let report = session.client.explain(&run_id, &args.instance).await?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

async fn cmd_extract(cli_server: Option<String>, args: ExtractArgs) -> anyhow::Result<()> {
    let oracle = args.oracle.resolve()?;
    let context = std::fs::read_to_string(&args.context)?;
    let fixed_aspects = match &args.aspects {
        Some(raw) => {
            let text = match raw.strip_prefix('@') {
                Some(path) => std::fs::read_to_string(path)?,
                None => raw.clone(),
            };
            Some(serde_json::from_str(&text).map_err(|e| config_err(format!("aspect list: {e}")))?)
        }
        None => None,
    };
    let session = connect(&cli_server, Path::new("runs")).await?;
    let config_path =
        args.config.canonicalize().unwrap_or_else(|_| args.config.clone()).display().to_string();
    let request = ExtractRequest {
        config: ConfigSource { path: Some(config_path), toml: None },
        extraction: ExtractionRequest {
            task_description: args.task_description.clone(),
            context,
            fixed_aspects,
            bounds: Some(prism_core::extraction::AspectBounds {
                min: args.min_aspects,
                max: args.max_aspects,
            }),
            repeats: args.repeats,
            permissive: args.permissive,
        },
        oracle,
        options: args.options.resolve(),
    };
    let response = session.client.extract(&request).await?;

    std::fs::create_dir_all(&args.out)?;
    for repeat in &response.output.repeats {
        let path = args.out.join(format!("repeat-{}.json", repeat.repeat));
        std::fs::write(&path, serde_json::to_string_pretty(repeat)?)?;
    }
    std::fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&response.output)?,
    )?;
    match response.output.probability_spread {
        Some(spread) => println!(
            "mean probability {:.4} over {} repeats (spread {:.4})",
            response.output.mean_probability,
            response.output.repeats.len(),
            spread
        ),
        None => println!("probability {:.4}", response.output.mean_probability),
    }
    println!("outputs written to {}", args.out.display());
    Ok(())
}

// ── Entry point ───────────────────────────────────────────────────────

async fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Serve(args) => {
            prism_server::serve(args.addr, args.runs_dir).await?;
            Ok(())
        }
        Command::Run(args) => cmd_run(cli.server, args).await,
        Command::Metrics(args) => cmd_metrics(cli.server, args).await,
        Command::Explain(args) => cmd_explain(cli.server, args).await,
        Command::Extract(args) => cmd_extract(cli.server, args).await,
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = Cli::parse();
    match dispatch(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::from(exit_code_for(&error))
        }
    }
}
