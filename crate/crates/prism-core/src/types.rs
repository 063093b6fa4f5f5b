//! Shared domain types: factors, instances, background sets, and task specs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Handle for one factor of a task: a dense index plus a display name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactorId {
    pub index: usize,
    pub name: String,
}

/// What kind of value a factor carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Numeric,
    Categorical,
    Text,
}

/// Schema entry for one factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorDef {
    pub name: String,
    pub kind: FactorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

/// A single factor value: numeric with optional unit, a category label, or
/// a free-form text summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorValue {
    Numeric {
        value: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        unit: Option<String>,
    },
    Categorical(String),
    Text(String),
}

impl FactorValue {
    pub fn numeric(value: f64) -> Self {
        FactorValue::Numeric { value, unit: None }
    }

    pub fn categorical(label: impl Into<String>) -> Self {
        FactorValue::Categorical(label.into())
    }

    pub fn text(body: impl Into<String>) -> Self {
        FactorValue::Text(body.into())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FactorValue::Numeric { value, .. } if !value.is_finite() => {
                Err(Error::input(format!("numeric factor value {value} is not finite")))
            }
            FactorValue::Text(body) if body.trim().is_empty() => {
                Err(Error::input("text factor value must be non-empty"))
            }
            _ => Ok(()),
        }
    }

    /// Prompt rendering. Numeric values are trailing-zero-free with at most
    /// four fractional digits so identical inputs always produce identical
    /// prompt bytes.
    pub fn render(&self) -> String {
        match self {
            FactorValue::Numeric { value, unit } => {
                let num = format_numeric(*value);
                match unit {
                    Some(u) => format!("{num} {u}"),
                    None => num,
                }
            }
            FactorValue::Categorical(label) => label.clone(),
            FactorValue::Text(body) => body.clone(),
        }
    }
}

/// Trailing-zero-free decimal with up to 4 fractional digits.
pub fn format_numeric(value: f64) -> String {
    let mut s = format!("{value:.4}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".to_string();
    }
    s
}

/// A complete assignment of factor values, optionally carrying the true outcome
/// (0/1 for binary tasks, a class index otherwise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub values: Vec<FactorValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl Instance {
    pub fn new(values: Vec<FactorValue>) -> Self {
        Instance { values, label: None }
    }

    pub fn with_label(values: Vec<FactorValue>, label: usize) -> Self {
        Instance { values, label: Some(label) }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate_against(&self, factors: &[FactorDef]) -> Result<()> {
        if self.values.len() != factors.len() {
            return Err(Error::input(format!(
                "instance has {} values but the schema has {} factors",
                self.values.len(),
                factors.len()
            )));
        }
        for value in &self.values {
            value.validate()?;
        }
        Ok(())
    }
}

/// A fixed, fully specified instance (population averages / majorities) used
/// to impute unrevealed factors and anchor reference-specific contributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceInstance {
    pub values: Vec<FactorValue>,
}

impl ReferenceInstance {
    pub fn new(values: Vec<FactorValue>) -> Self {
        ReferenceInstance { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate_against(&self, factors: &[FactorDef]) -> Result<()> {
        if self.values.len() != factors.len() {
            return Err(Error::input(format!(
                "reference instance has {} values but the schema has {} factors",
                self.values.len(),
                factors.len()
            )));
        }
        for value in &self.values {
            value.validate()?;
        }
        Ok(())
    }
}

/// The subset of factor indices revealed alongside the factor of interest.
/// Always sorted, duplicate-free, and never containing the factor of interest.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BackgroundSet {
    members: Vec<usize>,
}

impl BackgroundSet {
    pub fn empty() -> Self {
        BackgroundSet { members: Vec::new() }
    }

    /// Builds a set from arbitrary indices, sorting and deduplicating, and
    /// rejecting the excluded factor of interest.
    pub fn new(mut members: Vec<usize>, excluded: usize) -> Result<Self> {
        members.sort_unstable();
        members.dedup();
        if members.contains(&excluded) {
            return Err(Error::input(format!(
                "background set may not contain the factor of interest {excluded}"
            )));
        }
        Ok(BackgroundSet { members })
    }

    /// All subsets of `{0..m} \ {excluded}`, for exact enumeration.
    pub fn enumerate_all(m: usize, excluded: usize) -> Vec<BackgroundSet> {
        let others: Vec<usize> = (0..m).filter(|&j| j != excluded).collect();
        let n = others.len();
        (0u64..(1 << n))
            .map(|mask| {
                let members = others
                    .iter()
                    .enumerate()
                    .filter(|(bit, _)| mask >> bit & 1 == 1)
                    .map(|(_, &j)| j)
                    .collect();
                BackgroundSet { members }
            })
            .collect()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.members.binary_search(&index).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().copied()
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    /// The same set with `index` added (used for the with-factor arm).
    pub fn with(&self, index: usize) -> BackgroundSet {
        let mut members = self.members.clone();
        match members.binary_search(&index) {
            Ok(_) => {}
            Err(pos) => members.insert(pos, index),
        }
        BackgroundSet { members }
    }
}

/// An assignment that reveals only a subset of factors; `None` marks an
/// unrevealed slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialInstance {
    pub values: Vec<Option<FactorValue>>,
}

impl PartialInstance {
    /// Reveals exactly the factors in `subset` from `x`.
    pub fn from_subset(x: &Instance, subset: &BackgroundSet) -> Self {
        let values = x
            .values
            .iter()
            .enumerate()
            .map(|(j, v)| subset.contains(j).then(|| v.clone()))
            .collect();
        PartialInstance { values }
    }

    pub fn revealed_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    /// Indices of revealed factors, ascending.
    pub fn revealed_indices(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(j, v)| v.as_ref().map(|_| j))
            .collect()
    }
}

/// Where a task's base logit comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum BaseLogitSource {
    /// A fixed base probability, converted through the logit at resolution time.
    Fixed { p: f64 },
    /// Population positive rate, converted through the logit.
    PopulationRate { rate: f64 },
    /// Average of `repeats` score queries on the reference instance, then logit.
    QueryOracle { repeats: usize },
}

/// Prompt templates for every query family. Placeholders in braces are
/// substituted at render time; see the datasets module for the catalogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    pub score: String,
    pub level: String,
    pub comparative: String,
    pub table: String,
    pub per_class: String,
    pub icl: String,
    pub aspect_proposal: String,
    pub aspect_summary: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            score: "{question}\n\nCase information:\n{case}\n\nEstimate the probability that the answer is yes. Respond with your reasoning, then end with a final line of the form `Answer: [p]` where p is a probability between 0 and 1.".to_string(),
            level: "{question}\n\nCase information:\n{case}\n\nChoose the option that best describes the likelihood: very unlikely, unlikely, somewhat unlikely, neutral, somewhat likely, likely, very likely. End with a final line of the form `Answer: <option>`.".to_string(),
            comparative: "{question}\n\nConsider the following two cases. Some factors may be unavailable; judge each case on the factors shown.\n\nCase 1:\n{case_a}\n\nCase 2:\n{case_b}\n\nEstimate the probability for each case. End with a final line of the form `Answer: [p1, p2]`.".to_string(),
            table: "{question}\n\nThe table below lists {rows} records. Adjacent rows form matched pairs that differ in a single factor.\n\n{table}\n\nEstimate the probability for every record, in row order. End with a final line of the form `Answer: [p1, p2, ...]` with exactly {rows} values.".to_string(),
            per_class: "{question}\n\nPossible classes: {classes}.\n\nConsider the following two cases. Some factors may be unavailable; judge each case on the factors shown.\n\nCase 1:\n{case_a}\n\nCase 2:\n{case_b}\n\nFor each case, estimate the probability of each class, in the order listed. End with a final line of the form `Answer: [p1, ..., pM, q1, ..., qM]` giving Case 1's class probabilities followed by Case 2's.".to_string(),
            icl: "{question}\n\nHere are labelled examples:\n{demonstrations}\n\nNow consider:\n{case}\n\nEstimate the probability that the answer is yes. End with a final line of the form `Answer: [p]`.".to_string(),
            aspect_proposal: "{task}\n\nPropose the minimal set of aspects required to make this prediction from the context below. Aspects must be non-overlapping and together cover the information the prediction needs. Return between {min_aspects} and {max_aspects} aspects. End with a final line of the form `Answer: [{\"name\": \"...\", \"description\": \"...\"}, ...]` as a JSON array.\n\nContext:\n{context}".to_string(),
            aspect_summary: "{task}\n\nSummarize what the context says about the aspect \"{aspect}\" ({description}). If the context contains no information about the aspect, answer exactly `no information`. End with a final line of the form `Answer: <summary>`.".to_string(),
        }
    }
}

/// Everything the estimators need to know about one prediction task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    /// Positive-form question ("How likely is this patient to have a stroke?").
    pub question: String,
    /// Negated form, required only when the contrast baseline is enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_negated: Option<String>,
    pub factors: Vec<FactorDef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceInstance>,
    pub base_logit: BaseLogitSource,
    /// Background-set samples per factor.
    pub k: usize,
    /// Class names for multi-class tasks; absent for binary tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
    /// Per-class base logits for multi-class tasks (defaults to all zeros).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_base_logits: Option<Vec<f64>>,
    #[serde(default)]
    pub templates: PromptTemplates,
    /// Probability clamp width applied before logits.
    #[serde(default = "default_clamp_eps")]
    pub clamp_eps: f64,
    /// Maximum rows per batched table query; larger tables are chunked.
    #[serde(default = "default_row_limit")]
    pub row_limit: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

pub fn default_clamp_eps() -> f64 {
    1e-6
}

pub fn default_row_limit() -> usize {
    20
}

pub fn default_temperature() -> f64 {
    1.0
}

impl TaskSpec {
    /// Minimal spec for a synthetic or test task over `m` unnamed numeric factors.
    pub fn synthetic(id: impl Into<String>, m: usize) -> Self {
        let factors = (0..m)
            .map(|j| FactorDef {
                name: format!("f{j}"),
                kind: FactorKind::Numeric,
                unit: None,
            })
            .collect();
        TaskSpec {
            id: id.into(),
            question: "How likely is the outcome to be positive?".to_string(),
            question_negated: None,
            factors,
            reference: None,
            base_logit: BaseLogitSource::Fixed { p: 0.5 },
            k: 10,
            classes: None,
            class_base_logits: None,
            templates: PromptTemplates::default(),
            clamp_eps: default_clamp_eps(),
            row_limit: default_row_limit(),
            temperature: default_temperature(),
        }
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    pub fn factor_id(&self, index: usize) -> Result<FactorId> {
        let def = self
            .factors
            .get(index)
            .ok_or_else(|| Error::input(format!("factor index {index} out of range")))?;
        Ok(FactorId { index, name: def.name.clone() })
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(Error::Config("task needs at least one factor".to_string()));
        }
        let mut names: Vec<&str> = self.factors.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.factors.len() {
            return Err(Error::Config("factor names must be unique".to_string()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".to_string()));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::Config("clamp_eps must lie in (0, 0.5)".to_string()));
        }
        if self.row_limit < 2 || self.row_limit % 2 != 0 {
            return Err(Error::Config(
                "row_limit must be an even number of rows (pairs stay adjacent)".to_string(),
            ));
        }
        if let Some(reference) = &self.reference {
            reference.validate_against(&self.factors)?;
        }
        if let (Some(classes), Some(base)) = (&self.classes, &self.class_base_logits) {
            if classes.len() != base.len() {
                return Err(Error::Config(
                    "class_base_logits length must match the class count".to_string(),
                ));
            }
        }
        Ok(())
    }
}
