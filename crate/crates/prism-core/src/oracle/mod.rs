//! The evaluation-oracle contract and its implementations.
//!
//! An oracle maps rendered instance descriptions to probabilities. Backends:
//! deterministic synthetic models for verification, a transcript replayer for
//! fixtures, and a live chat-completions HTTP client with caching and retry.
//! Every response carries probabilities parsed from a machine-readable final
//! line of the form `Answer: [p1, p2, ...]`.

mod cache;
mod chat;
mod deterministic;
mod replay;

pub use cache::{CacheEntry, CacheStats, CacheStore, CachedOracle};
pub use chat::{ChatCompletionsConfig, ChatCompletionsOracle};
pub use deterministic::{
    CountingOracle, DeterministicOracle, FactorEncoder, FlakyOracle, Interaction, MulticlassModel,
    NoiseScope, NoisyLogitOracle, ScriptedOracle, SyntheticModel,
};
pub use replay::{read_transcript, RecordingOracle, ReplayOracle, TranscriptEntry};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::LikelihoodLevel;
use crate::error::{Error, Result};
use crate::tabular::ContrastTable;
use crate::types::{FactorValue, PartialInstance, TaskSpec};

// ── Query / response types ────────────────────────────────────────────

/// How a query is shaped and how many outputs it expects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    /// One case, one probability.
    Single,
    /// Both arms of a with/without pair in one prompt, two probabilities.
    ComparativePair,
    /// A contrast table, one probability per row.
    BatchedTable,
    /// Both arms of a pair, per-class probabilities for each arm.
    PerClass,
}

/// What the answer segment must contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedAnswer {
    /// Exactly `count` probabilities in `[0, 1]`.
    Probabilities { count: usize },
    /// One likelihood label from the fixed seven-level vocabulary.
    Level,
    /// A structured payload the caller parses from the raw text.
    Json,
    /// A free-form answer segment (factor summaries).
    Text,
}

/// Identifying metadata attached to a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct QueryMeta {
    pub task_id: String,
    pub instance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<usize>,
    pub temperature: f64,
    /// Distinguishes repeated samples of one semantic prompt (self-consistency).
    /// Participates in the digest so transcripts can replay repeats faithfully.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonce: Option<u64>,
    /// Skip cache read/write and in-flight deduplication for this query.
    #[serde(default)]
    pub no_cache: bool,
}

/// One structured row of a query payload. `None` marks an unrevealed factor;
/// batched-table rows are fully imputed and carry no `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub values: Vec<Option<FactorValue>>,
}

impl QueryRow {
    pub fn full(values: Vec<FactorValue>) -> Self {
        QueryRow { values: values.into_iter().map(Some).collect() }
    }

    pub fn partial(p: &PartialInstance) -> Self {
        QueryRow { values: p.values.clone() }
    }
}

/// A single oracle query: the rendered prompt for text backends plus the
/// structured rows deterministic backends evaluate directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleQuery {
    pub kind: QueryKind,
    pub rendered_prompt: String,
    pub expected: ExpectedAnswer,
    pub rows: Vec<QueryRow>,
    /// Number of classes per row; 1 except for per-class queries.
    pub classes: usize,
    pub meta: QueryMeta,
}

impl OracleQuery {
    /// Number of probabilities a well-formed response must carry.
    pub fn expected_outputs(&self) -> usize {
        match self.expected {
            ExpectedAnswer::Probabilities { count } => count,
            ExpectedAnswer::Level => 1,
            ExpectedAnswer::Json | ExpectedAnswer::Text => 0,
        }
    }

    /// Collision-resistant digest identifying this query for caching and
    /// replay: model id, kind, prompt, temperature, and nonce.
    pub fn digest(&self, model_id: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(model_id.as_bytes());
        hasher.update([0xff]);
        hasher.update(format!("{:?}", self.kind).as_bytes());
        hasher.update([0xff]);
        hasher.update(self.rendered_prompt.as_bytes());
        hasher.update([0xff]);
        hasher.update(self.meta.temperature.to_le_bytes());
        if let Some(nonce) = self.meta.nonce {
            hasher.update([0xfe]);
            hasher.update(nonce.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        match self.expected {
            ExpectedAnswer::Probabilities { count } if count == 0 => {
                Err(Error::input("a probability query must expect at least one output"))
            }
            ExpectedAnswer::Probabilities { count }
                if self.kind == QueryKind::BatchedTable && count != self.rows.len() =>
            {
                Err(Error::Protocol(format!(
                    "batched table expects one probability per row: {} rows vs {} outputs",
                    self.rows.len(),
                    count
                )))
            }
            _ => Ok(()),
        }
    }
}

/// A parsed oracle answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResponse {
    /// One probability per expected output (empty for JSON answers).
    pub probabilities: Vec<f64>,
    pub raw_text: String,
    pub cache_hit: bool,
    pub attempts: u32,
}

/// The probability-estimation backend contract.
#[async_trait]
pub trait Oracle: Send + Sync {
    async fn evaluate(&self, query: &OracleQuery) -> Result<OracleResponse>;

    /// Identifier mixed into cache/replay digests.
    fn model_id(&self) -> &str;
}

#[async_trait]
impl<T: Oracle + ?Sized> Oracle for std::sync::Arc<T> {
    async fn evaluate(&self, query: &OracleQuery) -> Result<OracleResponse> {
        (**self).evaluate(query).await
    }

    fn model_id(&self) -> &str {
        (**self).model_id()
    }
}

// ── Answer parsing ────────────────────────────────────────────────────

/// Extracts the payload of the last `Answer:` line.
fn answer_segment(raw_text: &str) -> Option<&str> {
    raw_text
        .lines()
        .rev()
        .map(str::trim)
        .find_map(|line| {
            let lower = line.to_ascii_lowercase();
            lower.strip_prefix("answer:").map(|_| line["answer:".len()..].trim())
        })
}

/// Extracts exactly `expected` probabilities from the designated answer
/// segment. Out-of-range values are range errors; no silent clamping happens
/// here (clamping is applied, and counted, at logit ingestion).
pub fn parse_probabilities(raw_text: &str, expected: usize) -> Result<Vec<f64>> {
    let segment = answer_segment(raw_text)
        .ok_or_else(|| Error::parse("no `Answer:` line found", raw_text))?;
    let body = segment
        .trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .trim();
    if body.is_empty() {
        return Err(Error::parse("empty answer segment", raw_text));
    }
    let mut values = Vec::new();
    for token in body.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let value: f64 = token
            .parse()
            .map_err(|_| Error::parse(format!("cannot parse probability `{token}`"), raw_text))?;
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Range(format!("probability {value} outside [0, 1]")));
        }
        values.push(value);
    }
    if values.len() != expected {
        return Err(Error::parse(
            format!("expected {expected} probabilities, found {}", values.len()),
            raw_text,
        ));
    }
    Ok(values)
}

/// Parses the single likelihood label of a level answer.
pub fn parse_level(raw_text: &str) -> Result<LikelihoodLevel> {
    let segment = answer_segment(raw_text)
        .ok_or_else(|| Error::parse("no `Answer:` line found", raw_text))?;
    LikelihoodLevel::from_label(segment)
}

/// Parses a JSON document from the answer segment.
pub fn parse_json_answer(raw_text: &str) -> Result<serde_json::Value> {
    let segment = answer_segment(raw_text)
        .ok_or_else(|| Error::parse("no `Answer:` line found", raw_text))?;
    serde_json::from_str(segment)
        .map_err(|e| Error::parse(format!("answer segment is not valid JSON: {e}"), raw_text))
}

/// Returns the raw answer segment, which must be non-empty.
pub fn parse_text_answer(raw_text: &str) -> Result<String> {
    let segment = answer_segment(raw_text)
        .ok_or_else(|| Error::parse("no `Answer:` line found", raw_text))?;
    if segment.is_empty() {
        return Err(Error::parse("empty answer segment", raw_text));
    }
    Ok(segment.to_string())
}

/// Builds an [`OracleResponse`] from raw text according to the query's
/// expected-answer contract. Shared by the replay and live backends.
pub fn response_from_raw(
    query: &OracleQuery,
    raw_text: String,
    cache_hit: bool,
    attempts: u32,
) -> Result<OracleResponse> {
    let probabilities = match query.expected {
        ExpectedAnswer::Probabilities { count } => parse_probabilities(&raw_text, count)?,
        ExpectedAnswer::Level => vec![parse_level(&raw_text)?.value()],
        ExpectedAnswer::Json => {
            parse_json_answer(&raw_text)?;
            Vec::new()
        }
        ExpectedAnswer::Text => {
            parse_text_answer(&raw_text)?;
            Vec::new()
        }
    };
    Ok(OracleResponse { probabilities, raw_text, cache_hit, attempts })
}

// ── Prompt rendering ──────────────────────────────────────────────────

/// Substitutes `{name}` placeholders in a template.
pub fn fill_template(template: &str, substitutions: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in substitutions {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

/// Renders a partial instance as one `name: value` line per revealed factor.
pub fn render_case(task: &TaskSpec, case: &PartialInstance) -> String {
    let lines: Vec<String> = task
        .factors
        .iter()
        .zip(&case.values)
        .filter_map(|(def, value)| value.as_ref().map(|v| format!("{}: {}", def.name, v.render())))
        .collect();
    if lines.is_empty() {
        "(no factor information available)".to_string()
    } else {
        lines.join("\n")
    }
}

/// Renders a full instance the same way (all factors revealed).
pub fn render_full_case(task: &TaskSpec, values: &[FactorValue]) -> String {
    let lines: Vec<String> = task
        .factors
        .iter()
        .zip(values)
        .map(|(def, v)| format!("{}: {}", def.name, v.render()))
        .collect();
    lines.join("\n")
}

/// One prompt presenting both arms of a with/without pair, requesting two
/// probabilities in prompt order (with-factor first).
pub fn render_comparative_prompt(
    task: &TaskSpec,
    x_with: &PartialInstance,
    x_without: &PartialInstance,
) -> String {
    fill_template(
        &task.templates.comparative,
        &[
            ("question", &task.question),
            ("case_a", &render_case(task, x_with)),
            ("case_b", &render_case(task, x_without)),
        ],
    )
}

/// Per-class variant of the comparative prompt.
pub fn render_per_class_prompt(
    task: &TaskSpec,
    x_with: &PartialInstance,
    x_without: &PartialInstance,
) -> String {
    let classes = task
        .classes
        .as_deref()
        .map(|c| c.join(", "))
        .unwrap_or_default();
    fill_template(
        &task.templates.per_class,
        &[
            ("question", &task.question),
            ("classes", &classes),
            ("case_a", &render_case(task, x_with)),
            ("case_b", &render_case(task, x_without)),
        ],
    )
}

/// Embeds a contrast table, as Markdown, in the task's table instruction
/// template. The answer format asks for one probability per row, row-indexed.
pub fn render_table_prompt(task: &TaskSpec, table: &ContrastTable) -> String {
    let names: Vec<&str> = task.factors.iter().map(|f| f.name.as_str()).collect();
    let rows = table.rows().len().to_string();
    fill_template(
        &task.templates.table,
        &[
            ("question", &task.question),
            ("table", &table.to_markdown(&names)),
            ("rows", &rows),
        ],
    )
}

/// Single-case score prompt (used by baselines and base-logit resolution).
pub fn render_score_prompt(task: &TaskSpec, values: &[FactorValue]) -> String {
    fill_template(
        &task.templates.score,
        &[("question", &task.question), ("case", &render_full_case(task, values))],
    )
}

/// Single-case likelihood-level prompt.
pub fn render_level_prompt(task: &TaskSpec, values: &[FactorValue]) -> String {
    fill_template(
        &task.templates.level,
        &[("question", &task.question), ("case", &render_full_case(task, values))],
    )
}

/// Negated-form score prompt for the contrast baseline.
pub fn render_negated_score_prompt(task: &TaskSpec, values: &[FactorValue]) -> Result<String> {
    let negated = task.question_negated.as_deref().ok_or_else(|| {
        Error::Config("contrast requires the task's negated question form".to_string())
    })?;
    Ok(fill_template(
        &task.templates.score,
        &[("question", negated), ("case", &render_full_case(task, values))],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{BackgroundSet, Instance};

    fn stroke_like_task() -> TaskSpec {
        let mut task = TaskSpec::synthetic("stroke-demo", 4);
        task.factors[0].name = "Age".to_string();
        task.factors[1].name = "Hypertension".to_string();
        task.factors[2].name = "Gender".to_string();
        task.factors[3].name = "Body Mass Index".to_string();
        task.question = "How likely is this patient to have a stroke?".to_string();
        task
    }

    #[test]
    fn parses_bracketed_probability_lists() {
        let got = parse_probabilities("Reasoning...\nAnswer: [0.35, 0.70]", 2).unwrap();
        assert_eq!(got, vec![0.35, 0.70]);
        let got = parse_probabilities("Answer: 0.5", 1).unwrap();
        assert_eq!(got, vec![0.5]);
    }

    #[test]
    fn prose_only_response_is_a_parse_error() {
        let err = parse_probabilities("the probability is high, around 0.8", 1).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn out_of_range_value_is_a_range_error_not_clamped() {
        let err = parse_probabilities("Answer: [1.2]", 1).unwrap_err();
        assert!(matches!(err, Error::Range(_)));
    }

    #[test]
    fn wrong_count_is_a_parse_error() {
        let err = parse_probabilities("Answer: [0.1, 0.2, 0.3]", 2).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn comparative_prompt_contains_both_case_descriptions() {
        let task = stroke_like_task();
        let x = Instance::new(vec![
            FactorValue::numeric(79.0),
            FactorValue::categorical("Yes"),
            FactorValue::categorical("Female"),
            FactorValue::numeric(22.3),
        ]);
        let s = BackgroundSet::new(vec![1, 2, 3], 0).unwrap();
        let with = PartialInstance::from_subset(&x, &s.with(0));
        let without = PartialInstance::from_subset(&x, &s);
        let prompt = render_comparative_prompt(&task, &with, &without);
        assert!(prompt.contains("Age: 79"));
        assert!(prompt.contains("Hypertension: Yes"));
        assert!(prompt.contains("Body Mass Index: 22.3"));
        // the without-arm still shows the background factors
        assert_eq!(prompt.matches("Hypertension: Yes").count(), 2);
        assert_eq!(prompt.matches("Age: 79").count(), 1);
    }

    #[test]
    fn empty_background_contrasts_one_factor_against_none() {
        let task = stroke_like_task();
        let x = Instance::new(vec![
            FactorValue::numeric(79.0),
            FactorValue::categorical("Yes"),
            FactorValue::categorical("Female"),
            FactorValue::numeric(22.3),
        ]);
        let empty = BackgroundSet::empty();
        let with = PartialInstance::from_subset(&x, &empty.with(0));
        let without = PartialInstance::from_subset(&x, &empty);
        let prompt = render_comparative_prompt(&task, &with, &without);
        assert!(prompt.contains("Age: 79"));
        assert!(prompt.contains("(no factor information available)"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let task = stroke_like_task();
        let x = Instance::new(vec![
            FactorValue::numeric(79.0),
            FactorValue::categorical("Yes"),
            FactorValue::categorical("Female"),
            FactorValue::numeric(22.3),
        ]);
        let s = BackgroundSet::new(vec![2], 0).unwrap();
        let with = PartialInstance::from_subset(&x, &s.with(0));
        let without = PartialInstance::from_subset(&x, &s);
        let first = render_comparative_prompt(&task, &with, &without);
        for _ in 0..100 {
            assert_eq!(render_comparative_prompt(&task, &with, &without), first);
        }
    }

    #[test]
    fn digest_distinguishes_nonce_and_temperature() {
        let task = stroke_like_task();
        let x = Instance::new(vec![
            FactorValue::numeric(79.0),
            FactorValue::categorical("Yes"),
            FactorValue::categorical("Female"),
            FactorValue::numeric(22.3),
        ]);
        let mut query = OracleQuery {
            kind: QueryKind::Single,
            rendered_prompt: render_score_prompt(&task, &x.values),
            expected: ExpectedAnswer::Probabilities { count: 1 },
            rows: vec![QueryRow::full(x.values.clone())],
            classes: 1,
            meta: QueryMeta { temperature: 1.0, ..Default::default() },
        };
        let base = query.digest("model-a");
        query.meta.nonce = Some(1);
        let with_nonce = query.digest("model-a");
        query.meta.nonce = None;
        query.meta.temperature = 0.5;
        let with_temp = query.digest("model-a");
        assert_ne!(base, with_nonce);
        assert_ne!(base, with_temp);
        assert_ne!(base, query.digest("model-b"));
    }
}
