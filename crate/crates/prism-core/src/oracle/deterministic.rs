//! Deterministic synthetic oracles for verification, plus test wrappers.
//!
//! A [`SyntheticModel`] is a logit-scale model over (possibly partial) rows:
//! unrevealed factors contribute nothing, so the model doubles as the subset
//! value function the estimators are checked against. Values are computed in
//! double precision directly from the encoded row, never from rendered text.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::shapley::sigmoid;
use crate::types::{FactorValue, Instance};

use super::{ExpectedAnswer, Oracle, OracleQuery, OracleResponse, QueryRow};

// ── Synthetic logit models ────────────────────────────────────────────

/// Per-factor encoder mapping a value to a real. The reference category of a
/// categorical factor encodes to zero, which makes additive closed forms exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorEncoder {
    /// Numeric factors encode to their raw value.
    Identity,
    /// Categories map through a table; absent categories (the reference) encode to 0.
    Categories(BTreeMap<String, f64>),
}

impl FactorEncoder {
    pub fn encode(&self, value: &FactorValue) -> f64 {
        match (self, value) {
            (FactorEncoder::Identity, FactorValue::Numeric { value, .. }) => *value,
            (FactorEncoder::Categories(map), FactorValue::Categorical(label)) => {
                map.get(label).copied().unwrap_or(0.0)
            }
            // Mismatched kinds encode to zero rather than failing: synthetic
            // models are test fixtures, not schema validators.
            _ => 0.0,
        }
    }
}

/// A pairwise interaction term `coefficient * enc(a) * enc(b)`, active only
/// when both factors are revealed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub a: usize,
    pub b: usize,
    pub coefficient: f64,
}

/// Additive-plus-interactions logit model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModel {
    pub intercept: f64,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub encoders: Vec<FactorEncoder>,
    #[serde(default)]
    pub interactions: Vec<Interaction>,
}

impl SyntheticModel {
    /// Purely additive numeric model.
    pub fn additive(intercept: f64, weights: Vec<f64>) -> Self {
        let encoders = vec![FactorEncoder::Identity; weights.len()];
        SyntheticModel { intercept, weights, encoders, interactions: Vec::new() }
    }

    pub fn with_interaction(mut self, a: usize, b: usize, coefficient: f64) -> Self {
        self.interactions.push(Interaction { a, b, coefficient });
        self
    }

    pub fn factor_count(&self) -> usize {
        self.weights.len()
    }

    fn encoder(&self, j: usize) -> &FactorEncoder {
        self.encoders.get(j).unwrap_or(&FactorEncoder::Identity)
    }

    /// Logit of a row; `None` slots contribute nothing and disable any
    /// interaction touching them.
    pub fn row_logit(&self, row: &QueryRow) -> f64 {
        let encoded: Vec<Option<f64>> = row
            .values
            .iter()
            .enumerate()
            .map(|(j, v)| v.as_ref().map(|value| self.encoder(j).encode(value)))
            .collect();
        let mut z = self.intercept;
        for (j, e) in encoded.iter().enumerate() {
            if let Some(e) = e {
                z += self.weights.get(j).copied().unwrap_or(0.0) * e;
            }
        }
        for it in &self.interactions {
            if let (Some(Some(ea)), Some(Some(eb))) = (encoded.get(it.a), encoded.get(it.b)) {
                z += it.coefficient * ea * eb;
            }
        }
        z
    }

    /// Logit of a fully revealed instance.
    pub fn instance_logit(&self, x: &Instance) -> f64 {
        self.row_logit(&QueryRow::full(x.values.clone()))
    }

    pub fn row_probability(&self, row: &QueryRow) -> f64 {
        sigmoid(self.row_logit(row))
    }
}

/// One independent sigmoid-probability model per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassModel {
    pub classes: Vec<SyntheticModel>,
}

// ── Deterministic oracle ──────────────────────────────────────────────

/// Pure oracle over a synthetic model; identical queries always yield
/// identical probabilities.
#[derive(Debug, Clone)]
pub struct DeterministicOracle {
    model: SyntheticModel,
    multiclass: Option<MulticlassModel>,
    id: String,
}

impl DeterministicOracle {
    pub fn new(model: SyntheticModel) -> Self {
        DeterministicOracle { model, multiclass: None, id: "deterministic".to_string() }
    }

    pub fn multiclass(models: MulticlassModel) -> Self {
        let first = models.classes.first().cloned().unwrap_or_else(|| SyntheticModel::additive(0.0, vec![]));
        DeterministicOracle { model: first, multiclass: Some(models), id: "deterministic-multiclass".to_string() }
    }

    pub fn model(&self) -> &SyntheticModel {
        &self.model
    }

    fn answer_for(&self, query: &OracleQuery) -> Result<Vec<f64>> {
        if query.classes > 1 {
            let models = self.multiclass.as_ref().ok_or_else(|| {
                Error::Protocol("per-class query sent to a binary oracle".to_string())
            })?;
            if models.classes.len() != query.classes {
                return Err(Error::Protocol(format!(
                    "oracle has {} classes but the query expects {}",
                    models.classes.len(),
                    query.classes
                )));
            }
            // Row-major: all classes of row 0, then all classes of row 1, ...
            Ok(query
                .rows
                .iter()
                .flat_map(|row| models.classes.iter().map(|m| m.row_probability(row)))
                .collect())
        } else {
            Ok(query.rows.iter().map(|row| self.model.row_probability(row)).collect())
        }
    }
}

#[async_trait]
impl Oracle for DeterministicOracle {
    async fn evaluate(&self, query: &OracleQuery) -> Result<OracleResponse> {
        query.validate()?;
        if !matches!(query.expected, ExpectedAnswer::Probabilities { .. }) {
            return Err(Error::Protocol(
                "deterministic oracle answers probability queries only".to_string(),
            ));
        }
        let probabilities = self.answer_for(query)?;
        if probabilities.len() != query.expected_outputs() {
            return Err(Error::Protocol(format!(
                "expected {} outputs, computed {}",
                query.expected_outputs(),
                probabilities.len()
            )));
        }
        let raw_text = format!(
            "Answer: [{}]",
            probabilities.iter().map(|p| format!("{p:.6}")).collect::<Vec<_>>().join(", ")
        );
        Ok(OracleResponse { probabilities, raw_text, cache_hit: false, attempts: 1 })
    }

    fn model_id(&self) -> &str {
        &self.id
    }
}

// ── Noisy oracle ──────────────────────────────────────────────────────

/// Where independent noise draws attach.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScope {
    /// One draw per query, shared by every row in it. Mirrors an oracle whose
    /// absolute level wanders between queries while within-query comparisons
    /// stay coherent.
    PerQuery,
    /// One draw per row.
    PerRow,
}

/// Synthetic model plus Gaussian logit noise. Noise is derived from the query
/// digest and a seed, so runs are reproducible regardless of evaluation order.
#[derive(Debug, Clone)]
pub struct NoisyLogitOracle {
    model: SyntheticModel,
    noise_sd: f64,
    scope: NoiseScope,
    seed: u64,
    id: String,
}

impl NoisyLogitOracle {
    pub fn new(model: SyntheticModel, noise_sd: f64, scope: NoiseScope, seed: u64) -> Self {
        NoisyLogitOracle { model, noise_sd, scope, seed, id: "noisy-synthetic".to_string() }
    }

    fn noise(&self, digest: &str, row: usize) -> f64 {
        let row_label = format!("row{row}");
        let mut stream = match self.scope {
            NoiseScope::PerQuery => rng::substream(self.seed, &["noise", digest]),
            NoiseScope::PerRow => rng::substream(self.seed, &["noise", digest, &row_label]),
        };
        let normal = Normal::new(0.0, self.noise_sd).expect("valid noise sd");
        normal.sample(&mut stream)
    }
}

#[async_trait]
impl Oracle for NoisyLogitOracle {
    async fn evaluate(&self, query: &OracleQuery) -> Result<OracleResponse> {
        query.validate()?;
        let digest = query.digest(&self.id);
        let probabilities: Vec<f64> = query
            .rows
            .iter()
            .enumerate()
            .map(|(r, row)| sigmoid(self.model.row_logit(row) + self.noise(&digest, r)))
            .collect();
        if probabilities.len() != query.expected_outputs() {
            return Err(Error::Protocol(format!(
                "expected {} outputs, computed {}",
                query.expected_outputs(),
                probabilities.len()
            )));
        }
        let raw_text = format!(
            "Answer: [{}]",
            probabilities.iter().map(|p| format!("{p:.6}")).collect::<Vec<_>>().join(", ")
        );
        Ok(OracleResponse { probabilities, raw_text, cache_hit: false, attempts: 1 })
    }

    fn model_id(&self) -> &str {
        &self.id
    }
}

// ── Test wrappers ─────────────────────────────────────────────────────

/// Counts queries and row evaluations passing through an inner oracle.
pub struct CountingOracle<O> {
    inner: O,
    queries: AtomicU64,
    rows: AtomicU64,
}

impl<O> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        CountingOracle { inner, queries: AtomicU64::new(0), rows: AtomicU64::new(0) }
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }

    /// Total row evaluations (rows × classes across all queries).
    pub fn row_evaluations(&self) -> u64 {
        self.rows.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.queries.store(0, Ordering::SeqCst);
        self.rows.store(0, Ordering::SeqCst);
    }
}

#[async_trait]
impl<O: Oracle> Oracle for CountingOracle<O> {
    async fn evaluate(&self, query: &OracleQuery) -> Result<OracleResponse> {
        self.queries.fetch_add(1, Ordering::SeqCst);
        self.rows
            .fetch_add((query.rows.len() * query.classes.max(1)) as u64, Ordering::SeqCst);
        self.inner.evaluate(query).await
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
}

/// Replays a fixed sequence of raw answers, one per call, for scripting
/// baseline behaviour in tests.
pub struct ScriptedOracle {
    responses: Mutex<std::collections::VecDeque<String>>,
    id: String,
}

impl ScriptedOracle {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(responses: I) -> Self {
        ScriptedOracle {
            responses: Mutex::new(responses.into_iter().map(Into::into).collect()),
            id: "scripted".to_string(),
        }
    }
}

#[async_trait]
impl Oracle for ScriptedOracle {
    async fn evaluate(&self, query: &OracleQuery) -> Result<OracleResponse> {
        let raw = self
            .responses
            .lock()
            .expect("scripted oracle lock")
            .pop_front()
            .ok_or_else(|| Error::query("scripted", "no scripted responses left"))?;
        super::response_from_raw(query, raw, false, 1)
    }

    fn model_id(&self) -> &str {
        &self.id
    }
}

/// A deterministic oracle useful for exercising failure paths: fails the
/// first `failures` calls with a transport error, then succeeds.
pub struct FlakyOracle<O> {
    inner: O,
    failures: AtomicU64,
}

impl<O> FlakyOracle<O> {
    pub fn new(inner: O, failures: u64) -> Self {
        FlakyOracle { inner, failures: AtomicU64::new(failures) }
    }
}

#[async_trait]
impl<O: Oracle> Oracle for FlakyOracle<O> {
    async fn evaluate(&self, query: &OracleQuery) -> Result<OracleResponse> {
        let remaining = self.failures.load(Ordering::SeqCst);
        if remaining > 0 {
            self.failures.store(remaining - 1, Ordering::SeqCst);
            return Err(Error::Transport {
                attempts: 1,
                message: "simulated transport failure".to_string(),
            });
        }
        self.inner.evaluate(query).await
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
}
