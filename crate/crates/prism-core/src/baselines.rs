//! Direct-prompting comparison methods: n-shot level, n-shot score,
//! contrast, and in-context learning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{
    fill_template, render_full_case, render_level_prompt, render_negated_score_prompt,
    render_score_prompt, ExpectedAnswer, Oracle, OracleQuery, QueryKind, QueryMeta, QueryRow,
};
use crate::rng::EngineRng;
use crate::types::{FactorValue, Instance, TaskSpec};

// ── Likelihood levels ─────────────────────────────────────────────────

/// The seven-point likelihood vocabulary with its fixed value mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodLevel {
    VeryUnlikely,
    Unlikely,
    SomewhatUnlikely,
    Neutral,
    SomewhatLikely,
    Likely,
    VeryLikely,
}

impl LikelihoodLevel {
    pub const ALL: [LikelihoodLevel; 7] = [
        LikelihoodLevel::VeryUnlikely,
        LikelihoodLevel::Unlikely,
        LikelihoodLevel::SomewhatUnlikely,
        LikelihoodLevel::Neutral,
        LikelihoodLevel::SomewhatLikely,
        LikelihoodLevel::Likely,
        LikelihoodLevel::VeryLikely,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            LikelihoodLevel::VeryUnlikely => "very unlikely",
            LikelihoodLevel::Unlikely => "unlikely",
            LikelihoodLevel::SomewhatUnlikely => "somewhat unlikely",
            LikelihoodLevel::Neutral => "neutral",
            LikelihoodLevel::SomewhatLikely => "somewhat likely",
            LikelihoodLevel::Likely => "likely",
            LikelihoodLevel::VeryLikely => "very likely",
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            LikelihoodLevel::VeryUnlikely => 0.05,
            LikelihoodLevel::Unlikely => 0.2,
            LikelihoodLevel::SomewhatUnlikely => 0.35,
            LikelihoodLevel::Neutral => 0.5,
            LikelihoodLevel::SomewhatLikely => 0.65,
            LikelihoodLevel::Likely => 0.8,
            LikelihoodLevel::VeryLikely => 0.95,
        }
    }

    pub fn from_label(label: &str) -> Result<Self> {
        let needle = label.trim().trim_matches('"').to_ascii_lowercase();
        Self::ALL
            .iter()
            .copied()
            .find(|level| level.label() == needle)
            .ok_or_else(|| Error::parse(format!("unmapped likelihood label `{needle}`"), label))
    }

    pub fn from_value(value: f64) -> Option<Self> {
        Self::ALL.iter().copied().find(|level| level.value() == value)
    }
}

// ── Demonstrations ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoRole {
    Positive,
    Negative,
}

/// A labelled training example embedded in an in-context-learning prompt.
/// Must come from data disjoint from the evaluation instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub values: Vec<FactorValue>,
    pub label: usize,
    pub role: DemoRole,
}

impl Demonstration {
    pub fn new(values: Vec<FactorValue>, label: usize) -> Self {
        let role = if label > 0 { DemoRole::Positive } else { DemoRole::Negative };
        Demonstration { values, label, role }
    }
}

// ── Query plumbing ────────────────────────────────────────────────────

fn single_query(
    task: &TaskSpec,
    x: &Instance,
    prompt: String,
    expected: ExpectedAnswer,
    instance_id: &str,
    nonce: Option<u64>,
) -> OracleQuery {
    OracleQuery {
        kind: QueryKind::Single,
        rendered_prompt: prompt,
        expected,
        rows: vec![QueryRow::full(x.values.clone())],
        classes: 1,
        meta: QueryMeta {
            task_id: task.id.clone(),
            instance_id: instance_id.to_string(),
            factor: None,
            temperature: task.temperature,
            nonce,
            no_cache: false,
        },
    }
}

// ── Methods ───────────────────────────────────────────────────────────

/// `n` independent level queries; returns the mapped value of the modal
/// label. Ties break toward the label nearer 0.5, then the lower value.
pub async fn nshot_level<O: Oracle + ?Sized>(
    oracle: &O,
    task: &TaskSpec,
    x: &Instance,
    n: usize,
    instance_id: &str,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::input("n must be at least 1"));
    }
    let mut counts: Vec<(LikelihoodLevel, usize)> =
        LikelihoodLevel::ALL.iter().map(|l| (*l, 0)).collect();
    for shot in 0..n {
        let prompt = render_level_prompt(task, &x.values);
        let nonce = (n > 1).then_some(shot as u64);
        let query = single_query(task, x, prompt, ExpectedAnswer::Level, instance_id, nonce);
        let response = oracle.evaluate(&query).await?;
        let level = LikelihoodLevel::from_value(response.probabilities[0]).ok_or_else(|| {
            Error::parse(
                format!("level response value {} is not in the mapping", response.probabilities[0]),
                response.raw_text.clone(),
            )
        })?;
        counts.iter_mut().find(|(l, _)| *l == level).expect("all levels listed").1 += 1;
    }
    let top = counts.iter().map(|(_, c)| *c).max().unwrap_or(0);
    let winner = counts
        .iter()
        .filter(|(_, c)| *c == top)
        .map(|(l, _)| *l)
        .min_by(|a, b| {
            let da = (a.value() - 0.5).abs();
            let db = (b.value() - 0.5).abs();
            da.partial_cmp(&db)
                .unwrap()
                .then(a.value().partial_cmp(&b.value()).unwrap())
        })
        .expect("at least one level observed");
    Ok(winner.value())
}

/// Arithmetic mean of `n` numeric-probability responses.
pub async fn nshot_score<O: Oracle + ?Sized>(
    oracle: &O,
    task: &TaskSpec,
    x: &Instance,
    n: usize,
    instance_id: &str,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::input("n must be at least 1"));
    }
    let mut total = 0.0;
    for shot in 0..n {
        let prompt = render_score_prompt(task, &x.values);
        let nonce = (n > 1).then_some(shot as u64);
        let query = single_query(
            task,
            x,
            prompt,
            ExpectedAnswer::Probabilities { count: 1 },
            instance_id,
            nonce,
        );
        let response = oracle.evaluate(&query).await?;
        total += response.probabilities[0];
    }
    Ok(total / n as f64)
}

/// One positive-form and one negated-form query, normalized so the two
/// answers sum to one.
pub async fn contrast<O: Oracle + ?Sized>(
    oracle: &O,
    task: &TaskSpec,
    x: &Instance,
    instance_id: &str,
) -> Result<f64> {
    let positive_prompt = render_score_prompt(task, &x.values);
    let negated_prompt = render_negated_score_prompt(task, &x.values)?;
    let positive = oracle
        .evaluate(&single_query(
            task,
            x,
            positive_prompt,
            ExpectedAnswer::Probabilities { count: 1 },
            instance_id,
            None,
        ))
        .await?
        .probabilities[0];
    let negative = oracle
        .evaluate(&single_query(
            task,
            x,
            negated_prompt,
            ExpectedAnswer::Probabilities { count: 1 },
            instance_id,
            None,
        ))
        .await?
        .probabilities[0];
    let sum = positive + negative;
    if sum == 0.0 {
        return Err(Error::Range(
            "contrast is degenerate: both answers are zero".to_string(),
        ));
    }
    Ok(positive / sum)
}

/// Renders demonstrations in a seeded shuffle order, then builds the prompt.
pub fn render_icl_prompt(
    task: &TaskSpec,
    x: &Instance,
    demonstrations: &[Demonstration],
    rng: &mut EngineRng,
) -> String {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..demonstrations.len()).collect();
    order.shuffle(rng);
    let blocks: Vec<String> = order
        .iter()
        .map(|&idx| {
            let demo = &demonstrations[idx];
            let outcome = if demo.label > 0 { "yes" } else { "no" };
            format!("{}\nOutcome: {outcome}", render_full_case(task, &demo.values))
        })
        .collect();
    fill_template(
        &task.templates.icl,
        &[
            ("question", &task.question),
            ("demonstrations", &blocks.join("\n\n")),
            ("case", &render_full_case(task, &x.values)),
        ],
    )
}

/// In-context learning: one score query whose prompt embeds the shuffled
/// demonstrations. With no demonstrations this is a single score query.
pub async fn icl<O: Oracle + ?Sized>(
    oracle: &O,
    task: &TaskSpec,
    x: &Instance,
    demonstrations: &[Demonstration],
    rng: &mut EngineRng,
    instance_id: &str,
) -> Result<f64> {
    let prompt = if demonstrations.is_empty() {
        render_score_prompt(task, &x.values)
    } else {
        render_icl_prompt(task, x, demonstrations, rng)
    };
    let query = single_query(
        task,
        x,
        prompt,
        ExpectedAnswer::Probabilities { count: 1 },
        instance_id,
        None,
    );
    let response = oracle.evaluate(&query).await?;
    Ok(response.probabilities[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::ScriptedOracle;
    use crate::rng::seeded;

    fn task() -> TaskSpec {
        let mut t = TaskSpec::synthetic("t", 2);
        t.question_negated = Some("How likely is the outcome to NOT be positive?".to_string());
        t
    }

    fn x() -> Instance {
        Instance::new(vec![FactorValue::numeric(1.0), FactorValue::numeric(2.0)])
    }

    #[test]
    fn level_mapping_is_the_fixed_bijection() {
        let expected = [
            ("very unlikely", 0.05),
            ("unlikely", 0.2),
            ("somewhat unlikely", 0.35),
            ("neutral", 0.5),
            ("somewhat likely", 0.65),
            ("likely", 0.8),
            ("very likely", 0.95),
        ];
        assert_eq!(LikelihoodLevel::ALL.len(), expected.len());
        for (label, value) in expected {
            let level = LikelihoodLevel::from_label(label).unwrap();
            assert_eq!(level.label(), label);
            assert_eq!(level.value(), value);
            assert_eq!(LikelihoodLevel::from_value(value), Some(level));
        }
        assert!(LikelihoodLevel::from_label("probably").is_err());
    }

    #[tokio::test]
    async fn one_shot_level_maps_the_single_label() {
        let oracle = ScriptedOracle::new(["Answer: likely"]);
        let p = nshot_level(&oracle, &task(), &x(), 1, "i").await.unwrap();
        assert_eq!(p, 0.8);
    }

    #[tokio::test]
    async fn five_shot_level_takes_the_mode() {
        let oracle = ScriptedOracle::new([
            "Answer: likely",
            "Answer: likely",
            "Answer: neutral",
            "Answer: very likely",
            "Answer: likely",
        ]);
        let p = nshot_level(&oracle, &task(), &x(), 5, "i").await.unwrap();
        assert_eq!(p, 0.8);
    }

    #[tokio::test]
    async fn level_ties_break_toward_half_then_lower() {
        // 0.2 and 0.8 are equidistant from 0.5; the lower value wins
        let oracle = ScriptedOracle::new(["Answer: unlikely", "Answer: likely"]);
        let p = nshot_level(&oracle, &task(), &x(), 2, "i").await.unwrap();
        assert_eq!(p, 0.2);
    }

    #[tokio::test]
    async fn unmapped_label_is_a_parse_error() {
        let oracle = ScriptedOracle::new(["Answer: certainly"]);
        let err = nshot_level(&oracle, &task(), &x(), 1, "i").await.unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[tokio::test]
    async fn nshot_score_averages() {
        let oracle = ScriptedOracle::new(["Answer: 0.35"]);
        assert_eq!(nshot_score(&oracle, &task(), &x(), 1, "i").await.unwrap(), 0.35);

        let oracle = ScriptedOracle::new([
            "Answer: 0.3",
            "Answer: 0.4",
            "Answer: 0.35",
            "Answer: 0.3",
            "Answer: 0.4",
        ]);
        let p = nshot_score(&oracle, &task(), &x(), 5, "i").await.unwrap();
        assert!((p - 0.35).abs() < 1e-12);
    }

    #[tokio::test]
    async fn score_stays_in_the_convex_hull_of_samples() {
        let oracle = ScriptedOracle::new(["Answer: 0.1", "Answer: 0.9", "Answer: 0.4"]);
        let p = nshot_score(&oracle, &task(), &x(), 3, "i").await.unwrap();
        assert!(p >= 0.1 && p <= 0.9);
    }

    #[tokio::test]
    async fn contrast_normalizes_the_two_answers() {
        let oracle = ScriptedOracle::new(["Answer: 0.7", "Answer: 0.2"]);
        let p = contrast(&oracle, &task(), &x(), "i").await.unwrap();
        assert!((p - 0.7 / 0.9).abs() < 1e-12);

        let oracle = ScriptedOracle::new(["Answer: 0.5", "Answer: 0.5"]);
        assert_eq!(contrast(&oracle, &task(), &x(), "i").await.unwrap(), 0.5);
    }

    #[tokio::test]
    async fn contrast_with_consistent_model_returns_positive_answer() {
        let p_pos = 0.64;
        let oracle = ScriptedOracle::new([
            format!("Answer: {p_pos}"),
            format!("Answer: {}", 1.0 - p_pos),
        ]);
        let p = contrast(&oracle, &task(), &x(), "i").await.unwrap();
        assert!((p - p_pos).abs() < 1e-12);
    }

    #[tokio::test]
    async fn contrast_is_scale_invariant() {
        let a = contrast(
            &ScriptedOracle::new(["Answer: 0.6", "Answer: 0.3"]),
            &task(),
            &x(),
            "i",
        )
        .await
        .unwrap();
        let b = contrast(
            &ScriptedOracle::new(["Answer: 0.2", "Answer: 0.1"]),
            &task(),
            &x(),
            "i",
        )
        .await
        .unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[tokio::test]
    async fn contrast_zero_sum_is_degenerate() {
        let oracle = ScriptedOracle::new(["Answer: 0.0", "Answer: 0.0"]);
        let err = contrast(&oracle, &task(), &x(), "i").await.unwrap_err();
        assert!(matches!(err, Error::Range(_)));
    }

    #[test]
    fn icl_prompt_embeds_all_demonstrations_and_is_seed_stable() {
        let demos: Vec<Demonstration> = (0..10)
            .map(|j| {
                Demonstration::new(
                    vec![FactorValue::numeric(j as f64), FactorValue::numeric(-(j as f64))],
                    usize::from(j < 5),
                )
            })
            .collect();
        let task = task();
        let mut rng = seeded(13);
        let prompt = render_icl_prompt(&task, &x(), &demos, &mut rng);
        assert_eq!(prompt.matches("Outcome:").count(), 10);
        assert_eq!(prompt.matches("Outcome: yes").count(), 5);

        let mut rng2 = seeded(13);
        assert_eq!(render_icl_prompt(&task, &x(), &demos, &mut rng2), prompt);

        let mut rng3 = seeded(14);
        assert_ne!(render_icl_prompt(&task, &x(), &demos, &mut rng3), prompt);
    }

    #[tokio::test]
    async fn icl_with_no_demos_is_a_single_score_query() {
        let oracle = ScriptedOracle::new(["Answer: 0.42"]);
        let mut rng = seeded(1);
        let p = icl(&oracle, &task(), &x(), &[], &mut rng, "i").await.unwrap();
        assert_eq!(p, 0.42);
    }
}
