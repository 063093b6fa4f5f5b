//! Shapley mathematics: exact subset-form values, permutation-sampled
//! estimates, logit transforms, and probability reconstruction.
//!
//! All estimation happens in logit space: oracle probabilities are converted
//! at ingestion (with counted clamping), contributions are averaged paired
//! logit differences, and the final probability is the sigmoid of the base
//! logit plus the contribution sum.

use std::sync::atomic::{AtomicU64, Ordering};

use futures::future::BoxFuture;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{
    render_comparative_prompt, render_per_class_prompt, ExpectedAnswer, Oracle, OracleQuery,
    QueryKind, QueryMeta, QueryRow,
};
use crate::rng::{instance_factor_stream, EngineRng};
use crate::types::{BackgroundSet, FactorId, Instance, PartialInstance, TaskSpec};

/// Largest factor count accepted by the exact enumerators (2^(m-1) evaluations
/// per factor is the desk-scale ceiling).
pub const MAX_EXACT_FACTORS: usize = 20;

/// How many comparative queries an estimator keeps in flight; the oracle's own
/// limiter still gates actual concurrency.
const QUERY_WINDOW: usize = 8;

// ── Logit transforms ──────────────────────────────────────────────────

/// Counts probability-clamp events so reports can surface them.
#[derive(Debug, Default)]
pub struct ClampCounter {
    clamped: AtomicU64,
    total: AtomicU64,
}

impl ClampCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, clamped: bool) {
        self.total.fetch_add(1, Ordering::Relaxed);
        if clamped {
            self.clamped.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn clamped(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.total.load(Ordering::Relaxed)
    }
}

/// Clamps a probability into `[eps, 1 - eps]`, reporting whether it moved.
pub fn clamp_probability(p: f64, eps: f64) -> (f64, bool) {
    if p < eps {
        (eps, true)
    } else if p > 1.0 - eps {
        (1.0 - eps, true)
    } else {
        (p, false)
    }
}

/// Inverse sigmoid `ln(p / (1 - p))` after clamping to `[eps, 1 - eps]`.
pub fn logit(p: f64, eps: f64) -> Result<f64> {
    if !p.is_finite() {
        return Err(Error::input(format!("logit input {p} is not finite")));
    }
    let (p, _) = clamp_probability(p, eps);
    Ok((p / (1.0 - p)).ln())
}

/// Logit with clamp accounting.
pub fn logit_counted(p: f64, eps: f64, clamps: &ClampCounter) -> Result<f64> {
    if !p.is_finite() {
        return Err(Error::input(format!("logit input {p} is not finite")));
    }
    let (p, clamped) = clamp_probability(p, eps);
    clamps.record(clamped);
    Ok((p / (1.0 - p)).ln())
}

/// Numerically stable logistic function, strictly inside (0, 1).
pub fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.max(f64::MIN_POSITIVE).min(1.0 - f64::EPSILON / 2.0)
}

/// Sigmoid that rejects non-finite input.
pub fn sigmoid_checked(z: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::input(format!("sigmoid input {z} is not finite")));
    }
    Ok(sigmoid(z))
}

/// Stable softmax; sums to 1 and is invariant under a common logit shift.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

// ── Background-set sampling ───────────────────────────────────────────

/// Draws the set of factors preceding `i` in a uniformly random permutation
/// of all `m` factors. Every subset size 0..m-1 is equally likely.
pub fn sample_background_set(i: usize, m: usize, rng: &mut EngineRng) -> Result<BackgroundSet> {
    if m == 0 || i >= m {
        return Err(Error::input(format!("factor {i} invalid for m = {m}")));
    }
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    let position = order.iter().position(|&j| j == i).expect("i is in the permutation");
    BackgroundSet::new(order[..position].to_vec(), i)
}

// ── Exact enumeration ─────────────────────────────────────────────────

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut value = 1.0;
    for j in 0..k {
        value = value * (n - j) as f64 / (j + 1) as f64;
    }
    value
}

/// Exact subset-form Shapley value of factor `i` under a deterministic scalar
/// value function over background sets. Costs `2^(m-1)` evaluations; refuses
/// `m` beyond [`MAX_EXACT_FACTORS`].
pub fn exact_shapley<F>(value: F, m: usize, i: usize) -> Result<f64>
where
    F: Fn(&BackgroundSet) -> f64,
{
    if m == 0 || i >= m {
        return Err(Error::input(format!("factor {i} invalid for m = {m}")));
    }
    if m > MAX_EXACT_FACTORS {
        return Err(Error::Size(format!(
            "exact enumeration over m = {m} factors exceeds the guard of {MAX_EXACT_FACTORS}"
        )));
    }
    let mut phi = 0.0;
    for subset in BackgroundSet::enumerate_all(m, i) {
        // |S|! (m - |S| - 1)! / m!  ==  1 / (m * C(m-1, |S|))
        let weight = 1.0 / (m as f64 * binomial(m - 1, subset.len()));
        let with = subset.with(i);
        phi += weight * (value(&with) - value(&subset));
    }
    Ok(phi)
}

// ── Estimates and reconstruction ──────────────────────────────────────

/// Per-factor Shapley estimate in logit units, with sampling metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyEstimate {
    pub factor: FactorId,
    pub phi: f64,
    pub k_samples: usize,
    /// Standard error of the mean paired difference; unavailable at k = 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
    /// Sampled background sets, kept when the estimator records them for audit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampled_sets: Option<Vec<BackgroundSet>>,
}

impl ShapleyEstimate {
    /// Builds an estimate from the raw paired differences.
    pub fn from_differences(
        factor: FactorId,
        differences: &[f64],
        sampled_sets: Option<Vec<BackgroundSet>>,
    ) -> Result<Self> {
        let k = differences.len();
        if k == 0 {
            return Err(Error::input("at least one paired difference is required"));
        }
        let phi = differences.iter().sum::<f64>() / k as f64;
        if !phi.is_finite() {
            return Err(Error::input("estimated phi is not finite"));
        }
        let std_error = if k > 1 {
            let var =
                differences.iter().map(|d| (d - phi).powi(2)).sum::<f64>() / (k as f64 - 1.0);
            Some((var / k as f64).sqrt())
        } else {
            None
        };
        Ok(ShapleyEstimate { factor, phi, k_samples: k, std_error, sampled_sets })
    }
}

/// Reconstruction ledger: base logit, contributions, their sum, and the
/// resulting probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub base_logit: f64,
    pub contributions: Vec<ShapleyEstimate>,
    pub total_logit: f64,
    pub probability: f64,
}

impl ReconstructionResult {
    pub fn contribution_sum(&self) -> f64 {
        self.contributions.iter().map(|c| c.phi).sum()
    }
}

/// Maps base logit plus contributions through the logistic link.
/// `total_logit` is exactly `base_logit + Σ phi` in left-to-right factor order.
pub fn reconstruct(
    base_logit: f64,
    contributions: Vec<ShapleyEstimate>,
) -> Result<ReconstructionResult> {
    if !base_logit.is_finite() {
        return Err(Error::input(format!("base logit {base_logit} is not finite")));
    }
    for c in &contributions {
        if !c.phi.is_finite() {
            return Err(Error::input(format!("phi for factor {} is not finite", c.factor.name)));
        }
    }
    let total_logit = base_logit + contributions.iter().map(|c| c.phi).sum::<f64>();
    let probability = sigmoid(total_logit);
    Ok(ReconstructionResult { base_logit, contributions, total_logit, probability })
}

// ── Permutation-sampled estimation through an oracle ──────────────────

fn comparative_query(
    task: &TaskSpec,
    x: &Instance,
    i: usize,
    subset: &BackgroundSet,
    instance_id: &str,
) -> OracleQuery {
    let with = PartialInstance::from_subset(x, &subset.with(i));
    let without = PartialInstance::from_subset(x, subset);
    OracleQuery {
        kind: QueryKind::ComparativePair,
        rendered_prompt: render_comparative_prompt(task, &with, &without),
        expected: ExpectedAnswer::Probabilities { count: 2 },
        rows: vec![QueryRow::partial(&with), QueryRow::partial(&without)],
        classes: 1,
        meta: QueryMeta {
            task_id: task.id.clone(),
            instance_id: instance_id.to_string(),
            factor: Some(i),
            temperature: task.temperature,
            nonce: None,
            no_cache: false,
        },
    }
}

/// Permutation-sampled Shapley estimate for factor `i`: the mean of `k`
/// paired logit differences, both arms of each pair evaluated in one query.
pub async fn estimate_shapley<O: Oracle + ?Sized>(
    oracle: &O,
    task: &TaskSpec,
    x: &Instance,
    i: usize,
    k_samples: usize,
    rng: &mut EngineRng,
    instance_id: &str,
    clamps: &ClampCounter,
) -> Result<ShapleyEstimate> {
    if k_samples == 0 {
        return Err(Error::input("k must be at least 1"));
    }
    let m = task.factor_count();
    x.validate_against(&task.factors)?;
    let factor = task.factor_id(i)?;

    let subsets: Vec<BackgroundSet> = (0..k_samples)
        .map(|_| sample_background_set(i, m, rng))
        .collect::<Result<_>>()?;
    let queries: Vec<OracleQuery> = subsets
        .iter()
        .map(|s| comparative_query(task, x, i, s, instance_id))
        .collect();

    let mut pending = Vec::with_capacity(queries.len());
    for query in &queries {
        pending.push(oracle.evaluate(query));
    }
    let responses: Vec<_> = stream::iter(pending).buffered(QUERY_WINDOW).collect().await;

    let mut differences = Vec::with_capacity(k_samples);
    for (sample_index, response) in responses.into_iter().enumerate() {
        let response = response.map_err(|e| {
            Error::query(
                format!("factor {} sample {sample_index}", factor.name),
                e.to_string(),
            )
        })?;
        let with = logit_counted(response.probabilities[0], task.clamp_eps, clamps)?;
        let without = logit_counted(response.probabilities[1], task.clamp_eps, clamps)?;
        differences.push(with - without);
    }
    ShapleyEstimate::from_differences(factor, &differences, None)
}

/// Runs the sampled estimator for every factor, then reconstructs.
/// Per-factor randomness comes from independent substreams of `seed`, so
/// results do not depend on evaluation order.
pub async fn prism_estimate<O: Oracle + ?Sized>(
    task: &TaskSpec,
    x: &Instance,
    base_logit: f64,
    oracle: &O,
    k_samples: usize,
    seed: u64,
    instance_id: &str,
    clamps: &ClampCounter,
) -> Result<ReconstructionResult> {
    task.validate()?;
    x.validate_against(&task.factors)?;
    let m = task.factor_count();

    let factor_runs: Vec<BoxFuture<'_, Result<ShapleyEstimate>>> = (0..m)
        .map(|i| {
            let run = async move {
                let mut rng = instance_factor_stream(seed, instance_id, i);
                estimate_shapley(oracle, task, x, i, k_samples, &mut rng, instance_id, clamps)
                    .await
            };
            Box::pin(run) as BoxFuture<'_, _>
        })
        .collect();
    let outcomes: Vec<Result<ShapleyEstimate>> =
        stream::iter(factor_runs).buffered(QUERY_WINDOW).collect().await;

    let mut contributions = Vec::with_capacity(m);
    let mut failures = Vec::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(estimate) => contributions.push(estimate),
            Err(e) => failures.push(format!("factor {i}: {e}")),
        }
    }
    if !failures.is_empty() {
        return Err(Error::query(
            format!(
                "instance {instance_id}: {} of {m} factors estimated before abort",
                contributions.len()
            ),
            failures.join("; "),
        ));
    }
    reconstruct(base_logit, contributions)
}

// ── Multi-class extension ─────────────────────────────────────────────

/// Reconstruction for one class of a multi-class task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAttribution {
    pub class: String,
    pub base_logit: f64,
    pub contributions: Vec<ShapleyEstimate>,
    pub total_logit: f64,
}

/// Multi-class estimate: per-class attributions plus the softmax distribution
/// over reconstructed class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassResult {
    pub per_class: Vec<ClassAttribution>,
    pub distribution: Vec<f64>,
    /// Argmax of the distribution; ties break toward the lowest class index.
    pub predicted: usize,
}

/// Paired-difference estimation of per-class contributions, reconstructed
/// per class and normalized with a softmax over the class logits.
pub async fn multiclass_estimate<O: Oracle + ?Sized>(
    task: &TaskSpec,
    x: &Instance,
    class_base_logits: &[f64],
    oracle: &O,
    k_samples: usize,
    seed: u64,
    instance_id: &str,
    clamps: &ClampCounter,
) -> Result<MulticlassResult> {
    let classes = task
        .classes
        .as_ref()
        .ok_or_else(|| Error::Config("multi-class estimation needs task classes".to_string()))?
        .clone();
    let class_count = classes.len();
    if class_count < 2 {
        return Err(Error::Config("multi-class estimation needs at least 2 classes".to_string()));
    }
    if class_base_logits.len() != class_count {
        return Err(Error::Protocol(format!(
            "{} base logits supplied for {} classes",
            class_base_logits.len(),
            class_count
        )));
    }
    x.validate_against(&task.factors)?;
    let m = task.factor_count();

    // phis[class][factor]
    let mut phis: Vec<Vec<ShapleyEstimate>> = vec![Vec::with_capacity(m); class_count];
    for i in 0..m {
        let mut rng = instance_factor_stream(seed, instance_id, i);
        let factor = task.factor_id(i)?;
        let subsets: Vec<BackgroundSet> = (0..k_samples)
            .map(|_| sample_background_set(i, m, &mut rng))
            .collect::<Result<_>>()?;

        let queries: Vec<OracleQuery> = subsets
            .iter()
            .map(|s| {
                let with = PartialInstance::from_subset(x, &s.with(i));
                let without = PartialInstance::from_subset(x, s);
                OracleQuery {
                    kind: QueryKind::PerClass,
                    rendered_prompt: render_per_class_prompt(task, &with, &without),
                    expected: ExpectedAnswer::Probabilities { count: 2 * class_count },
                    rows: vec![QueryRow::partial(&with), QueryRow::partial(&without)],
                    classes: class_count,
                    meta: QueryMeta {
                        task_id: task.id.clone(),
                        instance_id: instance_id.to_string(),
                        factor: Some(i),
                        temperature: task.temperature,
                        nonce: None,
                        no_cache: false,
                    },
                }
            })
            .collect();

        let mut pending = Vec::with_capacity(queries.len());
        for query in &queries {
            pending.push(oracle.evaluate(query));
        }
        let responses: Vec<_> = stream::iter(pending).buffered(QUERY_WINDOW).collect().await;

        let mut class_differences: Vec<Vec<f64>> = vec![Vec::with_capacity(k_samples); class_count];
        for (sample_index, response) in responses.into_iter().enumerate() {
            let response = response.map_err(|e| {
                Error::query(format!("factor {} sample {sample_index}", factor.name), e.to_string())
            })?;
            if response.probabilities.len() != 2 * class_count {
                return Err(Error::Protocol(format!(
                    "per-class query returned {} probabilities, expected {}",
                    response.probabilities.len(),
                    2 * class_count
                )));
            }
            for c in 0..class_count {
                let with = logit_counted(response.probabilities[c], task.clamp_eps, clamps)?;
                let without = logit_counted(
                    response.probabilities[class_count + c],
                    task.clamp_eps,
                    clamps,
                )?;
                class_differences[c].push(with - without);
            }
        }
        for c in 0..class_count {
            phis[c].push(ShapleyEstimate::from_differences(
                factor.clone(),
                &class_differences[c],
                None,
            )?);
        }
    }

    let mut per_class = Vec::with_capacity(class_count);
    for (c, name) in classes.iter().enumerate() {
        let contributions = std::mem::take(&mut phis[c]);
        let total_logit =
            class_base_logits[c] + contributions.iter().map(|e| e.phi).sum::<f64>();
        per_class.push(ClassAttribution {
            class: name.clone(),
            base_logit: class_base_logits[c],
            contributions,
            total_logit,
        });
    }
    let logits: Vec<f64> = per_class.iter().map(|a| a.total_logit).collect();
    let distribution = softmax(&logits);
    let predicted = argmax_lowest(&distribution);
    Ok(MulticlassResult { per_class, distribution, predicted })
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{DeterministicOracle, MulticlassModel, SyntheticModel};
    use crate::rng::seeded;
    use crate::types::FactorValue;

    const EPS: f64 = 1e-6;

    fn ones(m: usize) -> Instance {
        Instance::new((0..m).map(|_| FactorValue::numeric(1.0)).collect())
    }

    #[test]
    fn logit_matches_reported_base_logits() {
        assert!((logit(0.354, EPS).unwrap() - -0.6015).abs() < 5e-4);
        assert_eq!(logit(0.5, EPS).unwrap(), 0.0);
        assert!((logit(0.001, EPS).unwrap() - -6.9068).abs() < 5e-4);
        assert!((logit(0.410, EPS).unwrap() - -0.3640).abs() < 5e-4);
        assert!((logit(0.182, EPS).unwrap() - -1.5029).abs() < 5e-4);
    }

    #[test]
    fn logit_rejects_non_finite_and_clamps_extremes() {
        assert!(logit(f64::NAN, EPS).is_err());
        let clamps = ClampCounter::new();
        let z = logit_counted(0.0, EPS, &clamps).unwrap();
        assert!(z.is_finite());
        assert_eq!(clamps.clamped(), 1);
        logit_counted(0.5, EPS, &clamps).unwrap();
        assert_eq!(clamps.clamped(), 1);
        assert_eq!(clamps.total(), 2);
    }

    #[test]
    fn sigmoid_matches_reported_probabilities() {
        assert!((sigmoid(-0.355) - 0.413).abs() < 1e-3);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(-4.175) - 0.0152).abs() < 1e-3);
        assert!(sigmoid(1000.0) < 1.0);
        assert!(sigmoid(-1000.0) > 0.0);
        assert!(sigmoid_checked(f64::INFINITY).is_err());
    }

    #[test]
    fn logit_sigmoid_round_trip() {
        for k in 0..=1000 {
            let p = EPS + (1.0 - 2.0 * EPS) * k as f64 / 1000.0;
            let back = sigmoid(logit(p, EPS).unwrap());
            assert!((back - p).abs() <= 1e-12, "p = {p}, back = {back}");
        }
    }

    #[test]
    fn background_sampling_single_factor_is_always_empty() {
        let mut rng = seeded(1);
        for _ in 0..50 {
            assert!(sample_background_set(0, 1, &mut rng).unwrap().is_empty());
        }
    }

    #[test]
    fn background_sampling_two_factors_is_a_fair_coin() {
        let mut rng = seeded(2);
        let draws = 10_000;
        let mut empties = 0usize;
        for _ in 0..draws {
            if sample_background_set(0, 2, &mut rng).unwrap().is_empty() {
                empties += 1;
            }
        }
        let freq = empties as f64 / draws as f64;
        assert!((freq - 0.5).abs() < 0.02, "freq = {freq}");
    }

    #[test]
    fn background_sampling_sizes_are_uniform() {
        let mut rng = seeded(3);
        let draws = 60_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            counts[sample_background_set(1, 3, &mut rng).unwrap().len()] += 1;
        }
        for count in counts {
            let freq = count as f64 / draws as f64;
            assert!((freq - 1.0 / 3.0).abs() < 0.02, "freq = {freq}");
        }
    }

    #[test]
    fn exact_shapley_additive_game_returns_own_weight() {
        let w = [0.4, -0.2];
        let v = |s: &BackgroundSet| s.iter().map(|j| w[j]).sum::<f64>();
        assert!((exact_shapley(v, 2, 0).unwrap() - 0.4).abs() < 1e-12);
        assert!((exact_shapley(v, 2, 1).unwrap() - -0.2).abs() < 1e-12);
    }

    #[test]
    fn exact_shapley_splits_interaction_evenly() {
        // v(S) = 1[0 in S] + 1[1 in S] + 1[{0,1} subset of S]
        let v = |s: &BackgroundSet| {
            let mut total = 0.0;
            if s.contains(0) {
                total += 1.0;
            }
            if s.contains(1) {
                total += 1.0;
            }
            if s.contains(0) && s.contains(1) {
                total += 1.0;
            }
            total
        };
        assert!((exact_shapley(&v, 2, 0).unwrap() - 1.5).abs() < 1e-12);
        assert!((exact_shapley(&v, 2, 1).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn exact_shapley_dummy_factor_is_zero() {
        let v = |s: &BackgroundSet| if s.contains(0) { 2.0 } else { 0.5 };
        assert_eq!(exact_shapley(v, 3, 2).unwrap(), 0.0);
    }

    #[test]
    fn exact_shapley_guards_large_m() {
        let v = |_: &BackgroundSet| 0.0;
        assert!(matches!(exact_shapley(v, 21, 0).unwrap_err(), Error::Size(_)));
    }

    #[test]
    fn efficiency_holds_under_exact_enumeration() {
        // random-ish game over 5 factors with interactions
        let w = [0.3, -0.7, 1.1, 0.05, -0.4];
        let v = |s: &BackgroundSet| {
            let mut total: f64 = s.iter().map(|j| w[j]).sum();
            if s.contains(0) && s.contains(2) {
                total += 0.6;
            }
            if s.contains(1) && s.contains(4) {
                total -= 0.35;
            }
            total
        };
        let m = 5;
        let sum: f64 = (0..m).map(|i| exact_shapley(&v, m, i).unwrap()).sum();
        let full = BackgroundSet::enumerate_all(m, 0)
            .into_iter()
            .max_by_key(|s| s.len())
            .unwrap()
            .with(0);
        assert_eq!(full.len(), m);
        let expected = v(&full) - v(&BackgroundSet::empty());
        assert!((sum - expected).abs() < 1e-10);
    }

    #[tokio::test]
    async fn estimated_phi_is_exact_for_additive_logit_oracles() {
        let weights = vec![0.9, -0.3, 0.4];
        let oracle = DeterministicOracle::new(SyntheticModel::additive(0.1, weights.clone()));
        let task = TaskSpec::synthetic("t", 3);
        let x = ones(3);
        let clamps = ClampCounter::new();
        for (i, w) in weights.iter().enumerate() {
            let mut rng = seeded(41 + i as u64);
            let est = estimate_shapley(&oracle, &task, &x, i, 7, &mut rng, "x0", &clamps)
                .await
                .unwrap();
            assert!((est.phi - w).abs() < 1e-9, "phi = {}, w = {w}", est.phi);
            assert!(est.std_error.unwrap() < 1e-9);
        }
    }

    #[tokio::test]
    async fn estimator_recovers_interaction_split() {
        let model = SyntheticModel::additive(0.0, vec![1.0, 1.0]).with_interaction(0, 1, 1.0);
        let oracle = DeterministicOracle::new(model);
        let task = TaskSpec::synthetic("t", 2);
        let x = ones(2);
        let clamps = ClampCounter::new();
        let mut rng = seeded(7);
        let est = estimate_shapley(&oracle, &task, &x, 0, 5000, &mut rng, "x0", &clamps)
            .await
            .unwrap();
        assert!((est.phi - 1.5).abs() < 0.03, "phi = {}", est.phi);
    }

    #[tokio::test]
    async fn single_sample_reports_no_std_error() {
        let oracle = DeterministicOracle::new(SyntheticModel::additive(0.0, vec![0.5, 0.5]));
        let task = TaskSpec::synthetic("t", 2);
        let clamps = ClampCounter::new();
        let mut rng = seeded(9);
        let est = estimate_shapley(&oracle, &task, &ones(2), 0, 1, &mut rng, "x0", &clamps)
            .await
            .unwrap();
        assert_eq!(est.k_samples, 1);
        assert!(est.std_error.is_none());
    }

    #[tokio::test]
    async fn dummy_factor_estimates_to_exact_zero() {
        // weight 0 for factor 1 makes it a dummy under the oracle
        let oracle = DeterministicOracle::new(SyntheticModel::additive(0.2, vec![0.8, 0.0]));
        let task = TaskSpec::synthetic("t", 2);
        let clamps = ClampCounter::new();
        for k in [1usize, 3, 17] {
            let mut rng = seeded(k as u64);
            let est = estimate_shapley(&oracle, &task, &ones(2), 1, k, &mut rng, "x0", &clamps)
                .await
                .unwrap();
            assert_eq!(est.phi, 0.0);
            if k > 1 {
                assert_eq!(est.std_error, Some(0.0));
            }
        }
    }

    #[test]
    fn reconstruction_reproduces_reported_cases() {
        let case1 = reconstruct(-4.5951, contributions_summing_to(4.240)).unwrap();
        assert!((case1.probability - 0.413).abs() < 1e-3);
        assert!((case1.total_logit - -0.355).abs() < 5e-4);

        let trivial = reconstruct(0.0, vec![]).unwrap();
        assert_eq!(trivial.probability, 0.5);

        let loan = reconstruct(-1.504, contributions_summing_to(2.93)).unwrap();
        assert!((loan.total_logit - 1.426).abs() < 1e-9);
        assert!((loan.probability - 0.806).abs() < 2e-3);
    }

    fn contributions_summing_to(total: f64) -> Vec<ShapleyEstimate> {
        vec![ShapleyEstimate {
            factor: FactorId { index: 0, name: "f0".to_string() },
            phi: total,
            k_samples: 10,
            std_error: Some(0.0),
            sampled_sets: None,
        }]
    }

    #[test]
    fn reconstruction_identity_is_exact_by_construction() {
        let contributions: Vec<ShapleyEstimate> = [0.1, -0.7, 0.33, 1.9]
            .iter()
            .enumerate()
            .map(|(i, &phi)| ShapleyEstimate {
                factor: FactorId { index: i, name: format!("f{i}") },
                phi,
                k_samples: 5,
                std_error: Some(0.01),
                sampled_sets: None,
            })
            .collect();
        let result = reconstruct(-1.25, contributions.clone()).unwrap();
        let sum: f64 = contributions.iter().map(|c| c.phi).sum();
        assert_eq!(result.total_logit, result.base_logit + sum);
        assert_eq!(result.contributions, contributions);
    }

    #[test]
    fn reconstruct_rejects_non_finite_base() {
        assert!(reconstruct(f64::NAN, vec![]).is_err());
    }

    #[tokio::test]
    async fn prism_estimate_matches_oracle_on_additive_models() {
        // Property 1 realized: reconstruction equals the oracle's own output
        let weights = vec![0.6, -0.9, 0.2, 1.4];
        let b = -0.35;
        let model = SyntheticModel::additive(b, weights.clone());
        let oracle = DeterministicOracle::new(model.clone());
        let task = TaskSpec::synthetic("t", 4);
        let x = ones(4);
        let clamps = ClampCounter::new();
        let base = b; // phi0 = f(empty) = intercept for this model
        let result = prism_estimate(&task, &x, base, &oracle, 6, 5, "x0", &clamps)
            .await
            .unwrap();
        let direct = sigmoid(model.instance_logit(&x));
        assert!((result.probability - direct).abs() < 1e-9);
    }

    #[tokio::test]
    async fn prism_estimate_with_all_dummies_returns_base_probability() {
        let oracle = DeterministicOracle::new(SyntheticModel::additive(0.7, vec![0.0, 0.0, 0.0]));
        let task = TaskSpec::synthetic("t", 3);
        let clamps = ClampCounter::new();
        let result = prism_estimate(&task, &ones(3), 0.7, &oracle, 4, 1, "x0", &clamps)
            .await
            .unwrap();
        assert!((result.probability - sigmoid(0.7)).abs() < 1e-12);
    }

    #[tokio::test]
    async fn prism_estimate_tracks_exact_enumeration_under_interactions() {
        let model = SyntheticModel::additive(-0.2, vec![0.5, -0.4, 0.8, 0.3])
            .with_interaction(0, 2, 0.5)
            .with_interaction(1, 3, -0.3);
        let oracle = DeterministicOracle::new(model.clone());
        let task = TaskSpec::synthetic("t", 4);
        let x = ones(4);
        let clamps = ClampCounter::new();

        let value = |s: &BackgroundSet| {
            let row = QueryRow {
                values: x
                    .values
                    .iter()
                    .enumerate()
                    .map(|(j, v)| s.contains(j).then(|| v.clone()))
                    .collect(),
            };
            logit(model.row_probability(&row), EPS).unwrap()
        };
        let exact_sum: f64 = (0..4).map(|i| exact_shapley(value, 4, i).unwrap()).sum();

        let result = prism_estimate(&task, &x, -0.2, &oracle, 2000, 11, "x0", &clamps)
            .await
            .unwrap();
        let expected = sigmoid(-0.2 + exact_sum);
        assert!((result.probability - expected).abs() <= 0.02);
    }

    #[test]
    fn softmax_two_class_identity() {
        for z in [-2.0, -0.4, 0.0, 1.3, 5.0] {
            let dist = softmax(&[z, 0.0]);
            assert!((dist[0] - sigmoid(z)).abs() < 1e-12);
            assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance_and_tie_breaking() {
        let dist = softmax(&[1.0, 1.0, 0.0]);
        assert_eq!(argmax_lowest(&dist), 0);
        let shifted = softmax(&[11.0, 11.0, 10.0]);
        for (a, b) in dist.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[tokio::test]
    async fn symmetric_multiclass_oracle_yields_uniform_distribution() {
        let class_model = SyntheticModel::additive(0.3, vec![0.5, 0.5]);
        let models =
            MulticlassModel { classes: vec![class_model.clone(), class_model.clone(), class_model] };
        let oracle = DeterministicOracle::multiclass(models);
        let mut task = TaskSpec::synthetic("t", 2);
        task.classes = Some(vec!["a".into(), "b".into(), "c".into()]);
        let clamps = ClampCounter::new();
        let result =
            multiclass_estimate(&task, &ones(2), &[0.0, 0.0, 0.0], &oracle, 5, 3, "x0", &clamps)
                .await
                .unwrap();
        for p in &result.distribution {
            assert!((p - 1.0 / 3.0).abs() < 1e-9);
        }
        assert_eq!(result.predicted, 0);
    }

    #[tokio::test]
    async fn multiclass_argmax_matches_direct_oracle_argmax() {
        let classes = vec![
            SyntheticModel::additive(-0.4, vec![0.9, -0.2, 0.1]),
            SyntheticModel::additive(0.2, vec![-0.5, 0.7, 0.3]),
            SyntheticModel::additive(0.1, vec![0.2, 0.2, -0.8]),
        ];
        let direct_logits: Vec<f64> = classes
            .iter()
            .map(|c| c.instance_logit(&ones(3)))
            .collect();
        let direct_argmax = argmax_lowest(&direct_logits);
        let base: Vec<f64> = classes.iter().map(|c| c.intercept).collect();

        let oracle = DeterministicOracle::multiclass(MulticlassModel { classes });
        let mut task = TaskSpec::synthetic("t", 3);
        task.classes = Some(vec!["a".into(), "b".into(), "c".into()]);
        let clamps = ClampCounter::new();
        let result = multiclass_estimate(&task, &ones(3), &base, &oracle, 8, 19, "x0", &clamps)
            .await
            .unwrap();
        assert_eq!(result.predicted, direct_argmax);
        assert!((result.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
