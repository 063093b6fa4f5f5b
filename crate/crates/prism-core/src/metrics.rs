//! Evaluation metrics: AUROC, AUPRC, best F1, accuracy, and
//! importance-weighted reliability curves with ECE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::EngineRng;

/// One prediction with its binary label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabel {
    pub score: f64,
    pub label: u8,
}

impl ScoredLabel {
    pub fn new(score: f64, label: u8) -> Self {
        ScoredLabel { score, label }
    }
}

fn validate_binary(data: &[ScoredLabel]) -> Result<(usize, usize)> {
    for d in data {
        if !d.score.is_finite() {
            return Err(Error::input(format!("score {} is not finite", d.score)));
        }
        if d.label > 1 {
            return Err(Error::input(format!("label {} is not binary", d.label)));
        }
    }
    let positives = data.iter().filter(|d| d.label == 1).count();
    let negatives = data.len() - positives;
    Ok((positives, negatives))
}

// ── Ranking metrics ───────────────────────────────────────────────────

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Computed by sort-and-rank (average ranks on ties).
pub fn auroc(data: &[ScoredLabel]) -> Result<f64> {
    let (positives, negatives) = validate_binary(data)?;
    if positives == 0 || negatives == 0 {
        return Err(Error::MetricUndefined(
            "AUROC needs at least one positive and one negative".to_string(),
        ));
    }
    let mut indexed: Vec<(f64, u8)> = data.iter().map(|d| (d.score, d.label)).collect();
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    // average ranks over tie groups, 1-based
    let n = indexed.len();
    let mut positive_rank_sum = 0.0;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && indexed[end].0 == indexed[start].0 {
            end += 1;
        }
        let average_rank = (start + 1 + end) as f64 / 2.0; // mean of ranks start+1..=end
        for item in &indexed[start..end] {
            if item.1 == 1 {
                positive_rank_sum += average_rank;
            }
        }
        start = end;
    }
    let p = positives as f64;
    let q = negatives as f64;
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Area under precision-recall via step interpolation at each distinct
/// threshold (average-precision form).
pub fn auprc(data: &[ScoredLabel]) -> Result<f64> {
    let (positives, _) = validate_binary(data)?;
    if positives == 0 {
        return Err(Error::MetricUndefined("AUPRC needs at least one positive".to_string()));
    }
    let mut sorted: Vec<(f64, u8)> = data.iter().map(|d| (d.score, d.label)).collect();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));

    let total_positives = positives as f64;
    let mut true_positives = 0.0;
    let mut false_positives = 0.0;
    let mut previous_recall = 0.0;
    let mut area = 0.0;
    let mut idx = 0;
    let n = sorted.len();
    while idx < n {
        let mut end = idx + 1;
        while end < n && sorted[end].0 == sorted[idx].0 {
            end += 1;
        }
        for item in &sorted[idx..end] {
            if item.1 == 1 {
                true_positives += 1.0;
            } else {
                false_positives += 1.0;
            }
        }
        let precision = true_positives / (true_positives + false_positives);
        let recall = true_positives / total_positives;
        area += (recall - previous_recall) * precision;
        previous_recall = recall;
        idx = end;
    }
    Ok(area)
}

/// Best F1 under the Youden rule: the threshold maximizing TPR + TNR over all
/// distinct scores plus the predict-none cut; ties break toward higher F1,
/// then the lower threshold. Returns `(f1, threshold)` with "predicted
/// positive" meaning `score >= threshold`.
pub fn best_f1(data: &[ScoredLabel]) -> Result<(f64, f64)> {
    let (positives, negatives) = validate_binary(data)?;
    if positives == 0 || negatives == 0 {
        return Err(Error::MetricUndefined(
            "best F1 needs at least one positive and one negative".to_string(),
        ));
    }
    let mut sorted: Vec<(f64, u8)> = data.iter().map(|d| (d.score, d.label)).collect();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));

    let p = positives as f64;
    let q = negatives as f64;
    let mut candidates: Vec<(f64, f64, f64)> = Vec::new(); // (threshold, youden, f1)
    candidates.push((f64::INFINITY, 1.0, 0.0)); // predict none: TPR 0, TNR 1

    let mut true_positives = 0.0;
    let mut false_positives = 0.0;
    let n = sorted.len();
    let mut idx = 0;
    while idx < n {
        let mut end = idx + 1;
        while end < n && sorted[end].0 == sorted[idx].0 {
            end += 1;
        }
        for item in &sorted[idx..end] {
            if item.1 == 1 {
                true_positives += 1.0;
            } else {
                false_positives += 1.0;
            }
        }
        let tpr = true_positives / p;
        let tnr = (q - false_positives) / q;
        let f1 = if true_positives == 0.0 {
            0.0
        } else {
            2.0 * true_positives / (2.0 * true_positives + false_positives + (p - true_positives))
        };
        candidates.push((sorted[idx].0, tpr + tnr, f1));
        idx = end;
    }

    let best = candidates
        .into_iter()
        .max_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .unwrap()
                .then(a.2.partial_cmp(&b.2).unwrap())
                // prefer the lower threshold on remaining ties
                .then(b.0.partial_cmp(&a.0).unwrap())
        })
        .expect("at least one candidate");
    Ok((best.2, best.0))
}

/// Fraction of exact matches between predicted and true classes.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::input(format!(
            "prediction count {} does not match label count {}",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::MetricUndefined("accuracy over zero instances".to_string()));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / predicted.len() as f64)
}

// ── Weighted reliability ──────────────────────────────────────────────

/// Calibration settings: bin count plus the evaluation-split and target
/// population positive rates that define the importance weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub bins: usize,
    pub eval_positive_rate: f64,
    pub population_positive_rate: f64,
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::Config("bin count must be at least 1".to_string()));
        }
        for (name, rate) in [
            ("eval_positive_rate", self.eval_positive_rate),
            ("population_positive_rate", self.population_positive_rate),
        ] {
            if !(rate > 0.0 && rate < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {rate}")));
            }
        }
        Ok(())
    }
}

/// One equal-count bin of the reliability curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub mean_score: f64,
    pub weighted_positive_fraction: f64,
    pub weight: f64,
}

/// Weighted reliability curve plus its scalar ECE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityCurve {
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
    /// Set when a degenerate (zero-weight) bin had to be merged into a neighbor.
    pub merged_degenerate: bool,
}

impl ReliabilityCurve {
    /// CSV rows `bin,mean_score,weighted_positive_fraction,weight`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,mean_score,weighted_positive_fraction,weight\n");
        for (i, bin) in self.bins.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{}\n",
                bin.mean_score, bin.weighted_positive_fraction, bin.weight
            ));
        }
        out
    }
}

/// Bins by equal-count quantiles of the score, re-weights each point to the
/// target population mix (`π/π̂` for positives, `(1-π)/(1-π̂)` for negatives),
/// and sums the weighted bin gaps into ECE.
pub fn weighted_reliability(
    data: &[ScoredLabel],
    cfg: &CalibrationConfig,
) -> Result<ReliabilityCurve> {
    cfg.validate()?;
    validate_binary(data)?;
    let n = data.len();
    if n < cfg.bins {
        return Err(Error::input(format!(
            "{n} points cannot fill {} equal-count bins",
            cfg.bins
        )));
    }
    let mut sorted: Vec<ScoredLabel> = data.to_vec();
    sorted.sort_by(|a, b| a.score.partial_cmp(&b.score).expect("finite scores"));

    let positive_weight = cfg.population_positive_rate / cfg.eval_positive_rate;
    let negative_weight = (1.0 - cfg.population_positive_rate) / (1.0 - cfg.eval_positive_rate);

    let mut raw_bins: Vec<(f64, f64, f64)> = Vec::with_capacity(cfg.bins); // (Σw·p, Σw·y, Σw)
    for b in 0..cfg.bins {
        let start = b * n / cfg.bins;
        let end = (b + 1) * n / cfg.bins;
        let mut weighted_score = 0.0;
        let mut weighted_label = 0.0;
        let mut weight = 0.0;
        for point in &sorted[start..end] {
            let w = if point.label == 1 { positive_weight } else { negative_weight };
            weighted_score += w * point.score;
            weighted_label += w * f64::from(point.label);
            weight += w;
        }
        raw_bins.push((weighted_score, weighted_label, weight));
    }

    // merge zero-weight bins into their left neighbor (right neighbor for the first)
    let mut merged_degenerate = false;
    let mut merged: Vec<(f64, f64, f64)> = Vec::with_capacity(raw_bins.len());
    for bin in raw_bins {
        if bin.2 <= 0.0 {
            merged_degenerate = true;
            if let Some(last) = merged.last_mut() {
                last.0 += bin.0;
                last.1 += bin.1;
                last.2 += bin.2;
            }
            continue;
        }
        merged.push(bin);
    }
    if merged.is_empty() {
        return Err(Error::MetricUndefined("all reliability bins are degenerate".to_string()));
    }

    let total_weight: f64 = merged.iter().map(|b| b.2).sum();
    let mut bins = Vec::with_capacity(merged.len());
    let mut ece = 0.0;
    for (weighted_score, weighted_label, weight) in merged {
        let mean_score = weighted_score / weight;
        let positive_fraction = weighted_label / weight;
        ece += weight / total_weight * (mean_score - positive_fraction).abs();
        bins.push(ReliabilityBin {
            mean_score,
            weighted_positive_fraction: positive_fraction,
            weight,
        });
    }
    Ok(ReliabilityCurve { bins, ece, merged_degenerate })
}

// ── Bootstrap standard errors ─────────────────────────────────────────

/// Standard error of a metric under seeded instance-level resampling.
/// Resamples on which the metric is undefined (for example a single-class
/// draw) are skipped; the count of valid resamples is returned alongside.
pub fn bootstrap_std_error<F>(
    data: &[ScoredLabel],
    resamples: usize,
    rng: &mut EngineRng,
    metric: F,
) -> Result<(f64, usize)>
where
    F: Fn(&[ScoredLabel]) -> Result<f64>,
{
    use rand::Rng;
    if data.is_empty() || resamples < 2 {
        return Err(Error::input("bootstrap needs data and at least 2 resamples"));
    }
    let mut values = Vec::with_capacity(resamples);
    let mut draw = vec![ScoredLabel::new(0.0, 0); data.len()];
    for _ in 0..resamples {
        for slot in draw.iter_mut() {
            *slot = data[rng.gen_range(0..data.len())];
        }
        if let Ok(value) = metric(&draw) {
            values.push(value);
        }
    }
    if values.len() < 2 {
        return Err(Error::MetricUndefined(
            "metric undefined on nearly all bootstrap resamples".to_string(),
        ));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0);
    Ok((var.sqrt(), values.len()))
}

// ── Reports ───────────────────────────────────────────────────────────

/// Bootstrap settings recorded in report metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { resamples: 1000, seed: 0 }
    }
}

/// Full evaluation report for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub instances: usize,
    pub auroc: f64,
    pub auprc: f64,
    pub best_f1: f64,
    pub f1_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc_std_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auprc_std_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1_std_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ece: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reliability: Option<ReliabilityCurve>,
    pub metadata: ReportMetadata,
}

/// Conventions pinned in every report so numbers are comparable across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub auprc_convention: String,
    pub std_error_method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationConfig>,
}

/// Computes the standard report: ranking metrics, optional bootstrap standard
/// errors, and an optional weighted reliability curve.
pub fn compute_report(
    method: &str,
    data: &[ScoredLabel],
    calibration: Option<&CalibrationConfig>,
    bootstrap: Option<BootstrapConfig>,
) -> Result<MetricsReport> {
    let auroc_value = auroc(data)?;
    let auprc_value = auprc(data)?;
    let (f1_value, threshold) = best_f1(data)?;

    let mut report = MetricsReport {
        method: method.to_string(),
        instances: data.len(),
        auroc: auroc_value,
        auprc: auprc_value,
        best_f1: f1_value,
        f1_threshold: threshold,
        auroc_std_error: None,
        auprc_std_error: None,
        f1_std_error: None,
        ece: None,
        reliability: None,
        metadata: ReportMetadata {
            auprc_convention: "average_precision_step_interpolation".to_string(),
            std_error_method: match bootstrap {
                Some(cfg) => format!("bootstrap_{}_instance_resamples", cfg.resamples),
                None => "none".to_string(),
            },
            calibration: calibration.copied(),
        },
    };

    if let Some(cfg) = bootstrap {
        let mut rng = crate::rng::substream(cfg.seed, &["bootstrap", method]);
        report.auroc_std_error = Some(bootstrap_std_error(data, cfg.resamples, &mut rng, auroc)?.0);
        report.auprc_std_error = Some(bootstrap_std_error(data, cfg.resamples, &mut rng, auprc)?.0);
        report.f1_std_error = Some(
            bootstrap_std_error(data, cfg.resamples, &mut rng, |d| best_f1(d).map(|(f1, _)| f1))?.0,
        );
    }
    if let Some(cfg) = calibration {
        let curve = weighted_reliability(data, cfg)?;
        report.ece = Some(curve.ece);
        report.reliability = Some(curve);
    }
    Ok(report)
}
