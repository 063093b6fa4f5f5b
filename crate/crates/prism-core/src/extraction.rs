//! Factor extraction for unstructured tasks: propose a minimal,
//! non-overlapping, complete aspect set, then summarize the source context
//! per aspect into factors.
//!
//! Aspect counts stay fixed across instances of a task: aspects without
//! evidence summarize to an explicit "no information" rather than dropping
//! out, so the Shapley index set never changes size.

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{
    fill_template, parse_json_answer, parse_text_answer, ExpectedAnswer, Oracle, OracleQuery,
    QueryKind, QueryMeta,
};
use crate::types::{FactorValue, TaskSpec};

/// The marker summary for aspects the context says nothing about.
pub const NO_INFORMATION: &str = "no information";

/// One named aspect of a prediction task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aspect {
    pub name: String,
    pub description: String,
}

/// The proposed aspect vocabulary for a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectSet {
    pub aspects: Vec<Aspect>,
}

impl AspectSet {
    pub fn new(aspects: Vec<Aspect>, bounds: &AspectBounds) -> Result<Self> {
        if aspects.is_empty() {
            return Err(Error::input("aspect set must be non-empty"));
        }
        let mut names: Vec<&str> = aspects.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != aspects.len() {
            return Err(Error::input("duplicate aspect names rejected"));
        }
        if aspects.len() < bounds.min || aspects.len() > bounds.max {
            return Err(Error::input(format!(
                "{} aspects outside the configured bounds [{}, {}]",
                aspects.len(),
                bounds.min,
                bounds.max
            )));
        }
        Ok(AspectSet { aspects })
    }

    pub fn len(&self) -> usize {
        self.aspects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aspects.is_empty()
    }
}

/// Allowed aspect-count range; keeps query budgets predictable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectBounds {
    pub min: usize,
    pub max: usize,
}

impl Default for AspectBounds {
    fn default() -> Self {
        AspectBounds { min: 3, max: 12 }
    }
}

/// A character range of the source context backing a summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRef {
    pub start: usize,
    pub end: usize,
}

/// One extracted factor: the aspect it answers, its summary, and any spans of
/// the context the summary quotes verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedFactor {
    pub aspect: String,
    pub summary: FactorValue,
    pub spans: Vec<SpanRef>,
}

impl ExtractedFactor {
    pub fn is_no_information(&self) -> bool {
        match &self.summary {
            FactorValue::Text(body) => body.trim().eq_ignore_ascii_case(NO_INFORMATION),
            _ => false,
        }
    }
}

fn extraction_query(
    prompt: String,
    expected: ExpectedAnswer,
    task_id: &str,
    nonce: Option<u64>,
) -> OracleQuery {
    OracleQuery {
        kind: QueryKind::Single,
        rendered_prompt: prompt,
        expected,
        rows: Vec::new(),
        classes: 1,
        meta: QueryMeta {
            task_id: task_id.to_string(),
            instance_id: "extraction".to_string(),
            factor: None,
            temperature: 1.0,
            nonce,
            no_cache: false,
        },
    }
}

/// Asks the oracle for a minimal, non-overlapping, complete aspect set and
/// parses the structured answer. Completeness itself has no operational test;
/// it is stated in the prompt and otherwise taken on trust.
pub async fn propose_aspects<O: Oracle + ?Sized>(
    oracle: &O,
    task_description: &str,
    context: &str,
    bounds: &AspectBounds,
    task: &TaskSpec,
    nonce: Option<u64>,
) -> Result<AspectSet> {
    if context.trim().is_empty() {
        return Err(Error::input("context must be non-empty"));
    }
    let prompt = fill_template(
        &task.templates.aspect_proposal,
        &[
            ("task", task_description),
            ("context", context),
            ("min_aspects", &bounds.min.to_string()),
            ("max_aspects", &bounds.max.to_string()),
        ],
    );
    let query = extraction_query(prompt, ExpectedAnswer::Json, &task.id, nonce);
    let response = oracle.evaluate(&query).await?;
    let value = parse_json_answer(&response.raw_text)?;
    let aspects: Vec<Aspect> = serde_json::from_value(value).map_err(|e| {
        Error::parse(format!("aspect list has the wrong shape: {e}"), response.raw_text.clone())
    })?;
    AspectSet::new(aspects, bounds)
}

/// Fixed-aspect mode: the caller supplies the list; proposal is skipped.
pub fn fixed_aspects(aspects: Vec<Aspect>, bounds: &AspectBounds) -> Result<AspectSet> {
    AspectSet::new(aspects, bounds)
}

/// Spans of `context` that `summary` quotes verbatim (whole-summary match).
fn verbatim_spans(context: &str, summary: &str) -> Vec<SpanRef> {
    let mut spans = Vec::new();
    if summary.len() >= 12 {
        let mut offset = 0;
        while let Some(found) = context[offset..].find(summary) {
            let start = offset + found;
            spans.push(SpanRef { start, end: start + summary.len() });
            offset = start + 1;
            if spans.len() >= 8 {
                break;
            }
        }
    }
    spans
}

/// Summarizes the context once per aspect, preserving aspect order. Failures
/// are collected; without `permissive` any failure is an extraction error,
/// with it the failing aspects degrade to "no information" placeholders so the
/// factor count stays fixed.
pub async fn extract_factor_summaries<O: Oracle + ?Sized>(
    oracle: &O,
    task_description: &str,
    context: &str,
    aspects: &AspectSet,
    task: &TaskSpec,
    permissive: bool,
    nonce: Option<u64>,
) -> Result<Vec<ExtractedFactor>> {
    let runs: Vec<futures::future::BoxFuture<'_, Result<String>>> = aspects
        .aspects
        .iter()
        .map(|aspect| {
            let run = async move {
                let prompt = fill_template(
                    &task.templates.aspect_summary,
                    &[
                        ("task", task_description),
                        ("aspect", &aspect.name),
                        ("description", &aspect.description),
                        ("context", context),
                    ],
                );
                let query = extraction_query(prompt, ExpectedAnswer::Text, &task.id, nonce);
                let response = oracle.evaluate(&query).await?;
                parse_text_answer(&response.raw_text)
            };
            Box::pin(run) as futures::future::BoxFuture<'_, _>
        })
        .collect();
    let outcomes: Vec<Result<String>> = stream::iter(runs).buffered(4).collect().await;

    let mut factors = Vec::with_capacity(aspects.len());
    let mut failures = Vec::new();
    for (aspect, outcome) in aspects.aspects.iter().zip(outcomes) {
        match outcome {
            Ok(summary) => {
                let spans = verbatim_spans(context, &summary);
                factors.push(ExtractedFactor {
                    aspect: aspect.name.clone(),
                    summary: FactorValue::text(summary),
                    spans,
                });
            }
            Err(e) if permissive => {
                failures.push(format!("{}: {e}", aspect.name));
                factors.push(ExtractedFactor {
                    aspect: aspect.name.clone(),
                    summary: FactorValue::text(NO_INFORMATION),
                    spans: Vec::new(),
                });
            }
            Err(e) => failures.push(format!("{}: {e}", aspect.name)),
        }
    }
    if !failures.is_empty() && !permissive {
        return Err(Error::query("extraction", failures.join("; ")));
    }
    debug_assert_eq!(factors.len(), aspects.len());
    Ok(factors)
}

/// Builds the task spec used to estimate over extracted factors: one text
/// factor per aspect, in aspect order. Any tabular reference instance is
/// dropped; extracted-factor tasks run the pairwise estimator, not the
/// imputing one.
pub fn task_for_aspects(base: &TaskSpec, aspects: &AspectSet) -> TaskSpec {
    let mut task = base.clone();
    task.factors = aspects
        .aspects
        .iter()
        .map(|a| crate::types::FactorDef {
            name: a.name.clone(),
            kind: crate::types::FactorKind::Text,
            unit: None,
        })
        .collect();
    task.reference = None;
    task
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::ScriptedOracle;

    const APPLE_ASPECTS: [&str; 7] = [
        "production",
        "demand",
        "storage",
        "imports and exports",
        "policy",
        "cost",
        "varietal competition",
    ];

    fn apple_aspect_json() -> String {
        let aspects: Vec<serde_json::Value> = APPLE_ASPECTS
            .iter()
            .map(|name| serde_json::json!({"name": name, "description": format!("{name} outlook")}))
            .collect();
        format!("Answer: {}", serde_json::Value::Array(aspects))
    }

    #[tokio::test]
    async fn proposes_seven_apple_aspects() {
        let oracle = ScriptedOracle::new([apple_aspect_json()]);
        let task = TaskSpec::synthetic("apple", 1);
        let set = propose_aspects(&oracle, "will the price increase", "report text", &AspectBounds::default(), &task, None)
            .await
            .unwrap();
        assert_eq!(set.len(), 7);
        let names: Vec<&str> = set.aspects.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names, APPLE_ASPECTS);
    }

    #[tokio::test]
    async fn duplicate_aspects_are_rejected() {
        let raw = r#"Answer: [{"name": "form", "description": "x"}, {"name": "form", "description": "y"}, {"name": "other", "description": "z"}]"#;
        let oracle = ScriptedOracle::new([raw]);
        let task = TaskSpec::synthetic("t", 1);
        let err = propose_aspects(&oracle, "d", "ctx", &AspectBounds::default(), &task, None)
            .await
            .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn fixed_aspect_mode_echoes_the_caller_list() {
        let aspects: Vec<Aspect> = ["squad quality", "head-to-head records", "recent form", "player availability", "external conditions"]
            .iter()
            .map(|n| Aspect { name: n.to_string(), description: String::new() })
            .collect();
        let set = fixed_aspects(aspects.clone(), &AspectBounds::default()).unwrap();
        assert_eq!(set.aspects, aspects);
        assert_eq!(set.len(), 5);
    }

    #[tokio::test]
    async fn one_factor_per_aspect_in_order() {
        let responses: Vec<String> =
            (0..7).map(|i| format!("Answer: summary for aspect {i}")).collect();
        let oracle = ScriptedOracle::new(responses);
        let task = TaskSpec::synthetic("t", 1);
        let aspects = fixed_aspects(
            APPLE_ASPECTS
                .iter()
                .map(|n| Aspect { name: n.to_string(), description: String::new() })
                .collect(),
            &AspectBounds::default(),
        )
        .unwrap();
        let factors = extract_factor_summaries(&oracle, "task", "ctx", &aspects, &task, false, None)
            .await
            .unwrap();
        assert_eq!(factors.len(), 7);
        for (factor, aspect) in factors.iter().zip(&aspects.aspects) {
            assert_eq!(factor.aspect, aspect.name);
        }
    }

    #[tokio::test]
    async fn missing_evidence_is_flagged_not_omitted() {
        let oracle = ScriptedOracle::new(["Answer: prices fell", "Answer: no information"]);
        let task = TaskSpec::synthetic("t", 1);
        let aspects = fixed_aspects(
            vec![
                Aspect { name: "market".into(), description: String::new() },
                Aspect { name: "policy".into(), description: String::new() },
            ],
            &AspectBounds { min: 1, max: 12 },
        )
        .unwrap();
        let factors = extract_factor_summaries(&oracle, "task", "ctx", &aspects, &task, false, None)
            .await
            .unwrap();
        assert_eq!(factors.len(), 2);
        assert!(!factors[0].is_no_information());
        assert!(factors[1].is_no_information());
    }

    #[tokio::test]
    async fn partial_failure_errors_unless_permissive() {
        let make = || ScriptedOracle::new(["Answer: found something"]); // second aspect exhausts the script
        let task = TaskSpec::synthetic("t", 1);
        let aspects = fixed_aspects(
            vec![
                Aspect { name: "a".into(), description: String::new() },
                Aspect { name: "b".into(), description: String::new() },
            ],
            &AspectBounds { min: 1, max: 12 },
        )
        .unwrap();
        let err = extract_factor_summaries(&make(), "task", "ctx", &aspects, &task, false, None)
            .await
            .unwrap_err();
        assert!(matches!(err, Error::Query { .. }));

        let factors = extract_factor_summaries(&make(), "task", "ctx", &aspects, &task, true, None)
            .await
            .unwrap();
        assert_eq!(factors.len(), 2);
        assert!(factors[1].is_no_information());
    }

    #[tokio::test]
    async fn verbatim_summaries_get_span_references() {
        let context = "Harvest outlook: production is expected to decline by 17 percent. Demand is steady.";
        let quoted = "production is expected to decline by 17 percent";
        let oracle = ScriptedOracle::new([format!("Answer: {quoted}")]);
        let task = TaskSpec::synthetic("t", 1);
        let aspects = fixed_aspects(
            vec![Aspect { name: "production".into(), description: String::new() }],
            &AspectBounds { min: 1, max: 12 },
        )
        .unwrap();
        let factors = extract_factor_summaries(&oracle, "task", context, &aspects, &task, false, None)
            .await
            .unwrap();
        assert_eq!(factors[0].spans.len(), 1);
        let span = factors[0].spans[0];
        assert_eq!(&context[span.start..span.end], quoted);
    }
}
