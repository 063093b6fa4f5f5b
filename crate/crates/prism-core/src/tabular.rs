//! Reference-instance imputation, batched contrast tables, and
//! reference-specific Shapley values.
//!
//! Instead of one comparative query per background set, the tabular path packs
//! K with/without pairs into one table query per factor: query complexity
//! Θ(m), evaluation complexity Θ(mK). Unrevealed factors are always imputed
//! from the reference instance; rendering missing values is forbidden because
//! blanks bias the judgment of text oracles.

use futures::future::BoxFuture;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{
    render_table_prompt, ExpectedAnswer, Oracle, OracleQuery, QueryKind, QueryMeta, QueryRow,
};
use crate::rng::{instance_factor_stream, EngineRng};
use crate::shapley::{
    exact_shapley, logit_counted, reconstruct, sample_background_set, ClampCounter,
    ReconstructionResult, ShapleyEstimate,
};
use crate::types::{BackgroundSet, FactorId, FactorValue, Instance, TaskSpec};

pub use crate::types::ReferenceInstance;

// ── Contrast rows and tables ──────────────────────────────────────────

/// Where each cell of an imputed row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowOrigin {
    FromX,
    FromReference,
}

/// Which arm of a with/without pair a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairArm {
    WithFactor,
    WithoutFactor,
}

/// One fully imputed row of a contrast table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub row_values: Vec<FactorValue>,
    pub origin_mask: Vec<RowOrigin>,
    pub pair_id: usize,
    pub arm: PairArm,
}

/// A 2K-row table for one factor of interest; the two arms of each pair are
/// adjacent, with-factor arm first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastTable {
    rows: Vec<ContrastRow>,
    factor_of_interest: FactorId,
    sampled_sets: Vec<BackgroundSet>,
}

impl ContrastTable {
    pub fn rows(&self) -> &[ContrastRow] {
        &self.rows
    }

    pub fn factor_of_interest(&self) -> &FactorId {
        &self.factor_of_interest
    }

    pub fn sampled_sets(&self) -> &[BackgroundSet] {
        &self.sampled_sets
    }

    pub fn pair_count(&self) -> usize {
        self.rows.len() / 2
    }

    /// Pipe-delimited Markdown: header row of factor names, one row per
    /// contrast row, column order = schema order.
    pub fn to_markdown(&self, factor_names: &[&str]) -> String {
        let mut out = String::new();
        out.push_str(&format!("| {} |\n", factor_names.join(" | ")));
        out.push_str(&format!("|{}\n", " --- |".repeat(factor_names.len())));
        for row in &self.rows {
            let cells: Vec<String> = row.row_values.iter().map(|v| v.render()).collect();
            out.push_str(&format!("| {} |\n", cells.join(" | ")));
        }
        out
    }

    /// CSV audit dump: pair id and arm first, then factor columns in schema order.
    pub fn to_csv(&self, factor_names: &[&str]) -> String {
        let mut out = String::new();
        out.push_str(&format!("pair_id,arm,{}\n", factor_names.join(",")));
        for row in &self.rows {
            let arm = match row.arm {
                PairArm::WithFactor => "with",
                PairArm::WithoutFactor => "without",
            };
            let cells: Vec<String> = row.row_values.iter().map(|v| v.render()).collect();
            out.push_str(&format!("{},{},{}\n", row.pair_id, arm, cells.join(",")));
        }
        out
    }

    /// Splits into chunks of at most `row_limit` rows, never separating the
    /// two arms of a pair.
    pub fn chunks(&self, row_limit: usize) -> Vec<&[ContrastRow]> {
        let pairs_per_chunk = (row_limit / 2).max(1);
        self.rows.chunks(pairs_per_chunk * 2).collect()
    }
}

// ── Imputation ────────────────────────────────────────────────────────

/// Builds a full row: factor j comes from `x` when `j ∈ subset`, otherwise
/// from the reference.
pub fn impute(
    x: &Instance,
    subset: &BackgroundSet,
    reference: &ReferenceInstance,
) -> Result<(Vec<FactorValue>, Vec<RowOrigin>)> {
    if x.len() != reference.len() {
        return Err(Error::input(format!(
            "instance has {} factors, reference has {}",
            x.len(),
            reference.len()
        )));
    }
    let mut values = Vec::with_capacity(x.len());
    let mut origins = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        if subset.contains(j) {
            values.push(x.values[j].clone());
            origins.push(RowOrigin::FromX);
        } else {
            values.push(reference.values[j].clone());
            origins.push(RowOrigin::FromReference);
        }
    }
    Ok((values, origins))
}

/// Samples K background sets by the permutation rule and emits, for each, the
/// with-factor arm (factor i from x) directly followed by the without-factor
/// arm (factor i from the reference).
pub fn build_contrast_table(
    x: &Instance,
    i: usize,
    reference: &ReferenceInstance,
    k_samples: usize,
    rng: &mut EngineRng,
    factor: FactorId,
) -> Result<ContrastTable> {
    if k_samples == 0 {
        return Err(Error::input("k must be at least 1"));
    }
    let m = x.len();
    let mut rows = Vec::with_capacity(2 * k_samples);
    let mut sampled_sets = Vec::with_capacity(k_samples);
    for pair_id in 0..k_samples {
        let subset = sample_background_set(i, m, rng)?;
        let (with_values, with_origins) = impute(x, &subset.with(i), reference)?;
        let (without_values, without_origins) = impute(x, &subset, reference)?;
        rows.push(ContrastRow {
            row_values: with_values,
            origin_mask: with_origins,
            pair_id,
            arm: PairArm::WithFactor,
        });
        rows.push(ContrastRow {
            row_values: without_values,
            origin_mask: without_origins,
            pair_id,
            arm: PairArm::WithoutFactor,
        });
        sampled_sets.push(subset);
    }
    Ok(ContrastTable { rows, factor_of_interest: factor, sampled_sets })
}

// ── Batched estimation ────────────────────────────────────────────────

/// Reference-specific Shapley estimate for factor `i` from one contrast table.
/// The table's rows go to the oracle in one query (chunked only when they
/// exceed the task's row limit), and the estimate is the mean paired logit
/// difference. Pairs whose arms are value-identical contribute exactly zero,
/// whatever the oracle answered for them.
pub async fn tabular_shapley<O: Oracle + ?Sized>(
    oracle: &O,
    task: &TaskSpec,
    x: &Instance,
    i: usize,
    reference: &ReferenceInstance,
    k_samples: usize,
    rng: &mut EngineRng,
    instance_id: &str,
    clamps: &ClampCounter,
) -> Result<ShapleyEstimate> {
    let factor = task.factor_id(i)?;
    let table = build_contrast_table(x, i, reference, k_samples, rng, factor.clone())?;

    let mut probabilities = Vec::with_capacity(table.rows().len());
    for chunk in table.chunks(task.row_limit) {
        let chunk_table = ContrastTable {
            rows: chunk.to_vec(),
            factor_of_interest: factor.clone(),
            sampled_sets: Vec::new(),
        };
        let query = OracleQuery {
            kind: QueryKind::BatchedTable,
            rendered_prompt: render_table_prompt(task, &chunk_table),
            expected: ExpectedAnswer::Probabilities { count: chunk.len() },
            rows: chunk
                .iter()
                .map(|row| QueryRow::full(row.row_values.clone()))
                .collect(),
            classes: 1,
            meta: QueryMeta {
                task_id: task.id.clone(),
                instance_id: instance_id.to_string(),
                factor: Some(i),
                temperature: task.temperature,
                nonce: None,
                no_cache: false,
            },
        };
        let response = oracle
            .evaluate(&query)
            .await
            .map_err(|e| Error::query(format!("factor {}", factor.name), e.to_string()))?;
        if response.probabilities.len() != chunk.len() {
            return Err(Error::Protocol(format!(
                "table query for factor {} expected {} probabilities, received {}",
                factor.name,
                chunk.len(),
                response.probabilities.len()
            )));
        }
        probabilities.extend(response.probabilities);
    }

    let mut differences = Vec::with_capacity(k_samples);
    for pair_id in 0..k_samples {
        let with_row = &table.rows()[2 * pair_id];
        let without_row = &table.rows()[2 * pair_id + 1];
        if with_row.row_values == without_row.row_values {
            // x_i equals the reference value: the arms are the same row, so
            // the contrast is zero by construction.
            differences.push(0.0);
            continue;
        }
        let with = logit_counted(probabilities[2 * pair_id], task.clamp_eps, clamps)?;
        let without = logit_counted(probabilities[2 * pair_id + 1], task.clamp_eps, clamps)?;
        differences.push(with - without);
    }
    ShapleyEstimate::from_differences(factor, &differences, Some(table.sampled_sets.clone()))
}

/// Exact reference-specific Shapley value by full subset enumeration of
/// `v_r(S) = f([x_S, r_{S̄}])` for a deterministic logit-scale model `f` over
/// full rows.
pub fn exact_reference_shapley<F>(
    f: F,
    x: &Instance,
    reference: &ReferenceInstance,
    i: usize,
) -> Result<f64>
where
    F: Fn(&[FactorValue]) -> f64,
{
    if x.len() != reference.len() {
        return Err(Error::input("instance and reference lengths differ"));
    }
    let value = |s: &BackgroundSet| {
        let (values, _) = impute(x, s, reference).expect("lengths checked above");
        f(&values)
    };
    exact_shapley(value, x.len(), i)
}

/// Full Tabular-PRISM over one instance: one contrast-table query per factor,
/// then reconstruction from the resolved base logit.
pub async fn tabular_prism<O: Oracle + ?Sized>(
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
    let reference = task
        .reference
        .as_ref()
        .ok_or_else(|| Error::Config("tabular estimation needs a reference instance".to_string()))?;
    let m = task.factor_count();

    let factor_runs: Vec<BoxFuture<'_, Result<ShapleyEstimate>>> = (0..m)
        .map(|i| {
            let run = async move {
                let mut rng = instance_factor_stream(seed, instance_id, i);
                tabular_shapley(
                    oracle, task, x, i, reference, k_samples, &mut rng, instance_id, clamps,
                )
                .await
            };
            Box::pin(run) as BoxFuture<'_, _>
        })
        .collect();
    let outcomes: Vec<Result<ShapleyEstimate>> =
        stream::iter(factor_runs).buffered(4).collect().await;

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
