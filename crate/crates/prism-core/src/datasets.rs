//! Dataset ingestion and task configuration: CSV loading with column renames
//! and value maps, balanced sampling, base-logit resolution, and
//! factor-interaction aggregation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::oracle::{render_score_prompt, ExpectedAnswer, Oracle, OracleQuery, QueryKind, QueryMeta};
use crate::rng::EngineRng;
use crate::shapley::{logit, ClampCounter};
use crate::types::{
    BaseLogitSource, FactorDef, FactorKind, FactorValue, Instance, PromptTemplates,
    ReferenceInstance, TaskSpec,
};

// ── Task configuration file ───────────────────────────────────────────

/// `[task]` section of a config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSection {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub question_negated: Option<String>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "crate::types::default_row_limit")]
    pub row_limit: usize,
    #[serde(default = "crate::types::default_temperature")]
    pub temperature: f64,
    #[serde(default = "crate::types::default_clamp_eps")]
    pub clamp_eps: f64,
    #[serde(default)]
    pub classes: Option<Vec<String>>,
    #[serde(default)]
    pub class_base_logits: Option<Vec<f64>>,
}

fn default_k() -> usize {
    10
}

/// `[data]` section: how to turn a CSV into instances.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DataSection {
    pub label_column: String,
    /// Raw label value counted as the positive class (binary tasks).
    #[serde(default)]
    pub positive_value: Option<String>,
    /// Raw label values per class index (multi-class tasks).
    #[serde(default)]
    pub class_values: Option<Vec<String>>,
    /// Column to take instance ids from; row numbers otherwise.
    #[serde(default)]
    pub id_column: Option<String>,
    /// Raw CSV header → factor name.
    #[serde(default)]
    pub rename: BTreeMap<String, String>,
    /// Factor name → (raw value → mapped value), total over observed categories.
    #[serde(default)]
    pub value_map: BTreeMap<String, BTreeMap<String, String>>,
}

/// `[templates]` section: inline bodies or file references (relative to the
/// config file), file taking precedence.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TemplatesSection {
    #[serde(default)]
    pub score: Option<String>,
    #[serde(default)]
    pub score_file: Option<String>,
    #[serde(default)]
    pub level: Option<String>,
    #[serde(default)]
    pub level_file: Option<String>,
    #[serde(default)]
    pub comparative: Option<String>,
    #[serde(default)]
    pub comparative_file: Option<String>,
    #[serde(default)]
    pub table: Option<String>,
    #[serde(default)]
    pub table_file: Option<String>,
    #[serde(default)]
    pub per_class: Option<String>,
    #[serde(default)]
    pub per_class_file: Option<String>,
    #[serde(default)]
    pub icl: Option<String>,
    #[serde(default)]
    pub icl_file: Option<String>,
    #[serde(default)]
    pub aspect_proposal: Option<String>,
    #[serde(default)]
    pub aspect_proposal_file: Option<String>,
    #[serde(default)]
    pub aspect_summary: Option<String>,
    #[serde(default)]
    pub aspect_summary_file: Option<String>,
}

/// Whole config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskConfigFile {
    pub task: TaskSection,
    #[serde(default)]
    pub factors: Vec<FactorDef>,
    #[serde(default)]
    pub data: Option<DataSection>,
    /// Factor name → reference value (number or string, typed by factor kind).
    #[serde(default)]
    pub reference: Option<BTreeMap<String, toml::Value>>,
    pub base_logit: BaseLogitSource,
    #[serde(default)]
    pub templates: Option<TemplatesSection>,
}

/// A loaded, validated task configuration.
#[derive(Debug, Clone)]
pub struct TaskConfig {
    pub spec: TaskSpec,
    pub data: Option<DataSection>,
    /// Digest of the config text plus any referenced template files.
    pub fingerprint: String,
}

fn reference_value(def: &FactorDef, raw: &toml::Value) -> Result<FactorValue> {
    match (def.kind, raw) {
        (FactorKind::Numeric, toml::Value::Float(v)) => {
            Ok(FactorValue::Numeric { value: *v, unit: def.unit.clone() })
        }
        (FactorKind::Numeric, toml::Value::Integer(v)) => {
            Ok(FactorValue::Numeric { value: *v as f64, unit: def.unit.clone() })
        }
        (FactorKind::Categorical, toml::Value::String(s)) => Ok(FactorValue::categorical(s)),
        (FactorKind::Text, toml::Value::String(s)) => Ok(FactorValue::text(s)),
        _ => Err(Error::Config(format!(
            "reference value for factor {} does not match its kind",
            def.name
        ))),
    }
}

fn resolve_template(
    inline: &Option<String>,
    file: &Option<String>,
    base_dir: &Path,
    fallback: &str,
    hasher: &mut Sha256,
) -> Result<String> {
    if let Some(rel) = file {
        let path = base_dir.join(rel);
        let body = std::fs::read_to_string(&path).map_err(|e| {
            Error::Config(format!("cannot read template {}: {e}", path.display()))
        })?;
        hasher.update(body.as_bytes());
        return Ok(body);
    }
    if let Some(body) = inline {
        return Ok(body.clone());
    }
    Ok(fallback.to_string())
}

/// Parses a TOML task config, resolving template files relative to `base_dir`.
pub fn parse_task_config(text: &str, base_dir: &Path) -> Result<TaskConfig> {
    let file: TaskConfigFile =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;

    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());

    let defaults = PromptTemplates::default();
    let templates = match &file.templates {
        None => defaults.clone(),
        Some(t) => PromptTemplates {
            score: resolve_template(&t.score, &t.score_file, base_dir, &defaults.score, &mut hasher)?,
            level: resolve_template(&t.level, &t.level_file, base_dir, &defaults.level, &mut hasher)?,
            comparative: resolve_template(
                &t.comparative,
                &t.comparative_file,
                base_dir,
                &defaults.comparative,
                &mut hasher,
            )?,
            table: resolve_template(&t.table, &t.table_file, base_dir, &defaults.table, &mut hasher)?,
            per_class: resolve_template(
                &t.per_class,
                &t.per_class_file,
                base_dir,
                &defaults.per_class,
                &mut hasher,
            )?,
            icl: resolve_template(&t.icl, &t.icl_file, base_dir, &defaults.icl, &mut hasher)?,
            aspect_proposal: resolve_template(
                &t.aspect_proposal,
                &t.aspect_proposal_file,
                base_dir,
                &defaults.aspect_proposal,
                &mut hasher,
            )?,
            aspect_summary: resolve_template(
                &t.aspect_summary,
                &t.aspect_summary_file,
                base_dir,
                &defaults.aspect_summary,
                &mut hasher,
            )?,
        },
    };

    let reference = match &file.reference {
        None => None,
        Some(table) => {
            let mut values = Vec::with_capacity(file.factors.len());
            for def in &file.factors {
                let raw = table.get(&def.name).ok_or_else(|| {
                    Error::Config(format!("reference is missing factor {}", def.name))
                })?;
                values.push(reference_value(def, raw)?);
            }
            Some(ReferenceInstance::new(values))
        }
    };

    let spec = TaskSpec {
        id: file.task.id.clone(),
        question: file.task.question.clone(),
        question_negated: file.task.question_negated.clone(),
        factors: file.factors.clone(),
        reference,
        base_logit: file.base_logit.clone(),
        k: file.task.k,
        classes: file.task.classes.clone(),
        class_base_logits: file.task.class_base_logits.clone(),
        templates,
        clamp_eps: file.task.clamp_eps,
        row_limit: file.task.row_limit,
        temperature: file.task.temperature,
    };
    spec.validate()?;
    if let Some(data) = &file.data {
        if data.positive_value.is_none() && data.class_values.is_none() {
            return Err(Error::Config(
                "data section needs positive_value or class_values".to_string(),
            ));
        }
    }
    Ok(TaskConfig { spec, data: file.data, fingerprint: hex::encode(hasher.finalize()) })
}

/// Loads a config from disk.
pub fn load_task_config(path: &Path) -> Result<TaskConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    parse_task_config(&text, base_dir)
}

// ── Datasets ──────────────────────────────────────────────────────────

/// One labelled row with a stable id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub id: String,
    pub instance: Instance,
}

/// Where a dataset came from and under which preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    /// Digest over the preprocessing descriptor and every row; changes when
    /// any mapping changes.
    pub fingerprint: String,
}

/// An immutable, schema-validated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub rows: Vec<DatasetRow>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn positive_rate(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let positives = self.rows.iter().filter(|r| r.instance.label == Some(1)).count();
        positives as f64 / self.rows.len() as f64
    }

    /// JSONL round-trip: one row per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&self.provenance)?);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Dataset> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let provenance: Provenance = serde_json::from_str(
            lines.next().ok_or_else(|| Error::Ingest("empty dataset dump".to_string()))?,
        )?;
        let rows: Vec<DatasetRow> =
            lines.map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
        Ok(Dataset { rows, provenance })
    }
}

fn fingerprint_rows(descriptor: &str, rows: &[DatasetRow]) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(descriptor.as_bytes());
    for row in rows {
        hasher.update([0xff]);
        hasher.update(serde_json::to_string(row)?.as_bytes());
    }
    Ok(hex::encode(hasher.finalize()))
}

fn parse_cell(
    def: &FactorDef,
    raw: &str,
    maps: &BTreeMap<String, BTreeMap<String, String>>,
    row_number: usize,
) -> Result<FactorValue> {
    let mapped: String = match maps.get(&def.name) {
        Some(map) => map
            .get(raw.trim())
            .cloned()
            .ok_or_else(|| {
                Error::Ingest(format!(
                    "row {row_number}, column {}: unmapped categorical value {raw:?}",
                    def.name
                ))
            })?,
        None => raw.trim().to_string(),
    };
    match def.kind {
        FactorKind::Numeric => {
            let value: f64 = mapped.parse().map_err(|_| {
                Error::Ingest(format!(
                    "row {row_number}, column {}: cannot parse numeric value {mapped:?}",
                    def.name
                ))
            })?;
            Ok(FactorValue::Numeric { value, unit: def.unit.clone() })
        }
        FactorKind::Categorical => Ok(FactorValue::categorical(mapped)),
        FactorKind::Text => Ok(FactorValue::text(mapped)),
    }
}

/// Loads a CSV under a task config: renames columns, maps values, drops
/// unlisted columns, validates every row against the schema.
pub fn load_csv(path: &Path, config: &TaskConfig) -> Result<Dataset> {
    let data = config
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("task config has no data section".to_string()))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {e}", path.display())))?;

    let headers: Vec<String> =
        reader.headers().map_err(|e| Error::Ingest(e.to_string()))?.iter().map(String::from).collect();
    for raw in data.rename.keys() {
        if !headers.iter().any(|h| h == raw) {
            return Err(Error::Ingest(format!(
                "rename source column {raw:?} is not in the CSV header"
            )));
        }
    }
    let renamed: Vec<String> = headers
        .iter()
        .map(|h| data.rename.get(h).cloned().unwrap_or_else(|| h.clone()))
        .collect();

    // factor name → column index, in schema order
    let mut factor_columns = Vec::with_capacity(config.spec.factors.len());
    for def in &config.spec.factors {
        let idx = renamed.iter().position(|h| h == &def.name).ok_or_else(|| {
            Error::Ingest(format!("schema factor {:?} has no CSV column", def.name))
        })?;
        factor_columns.push(idx);
    }
    let label_column = headers
        .iter()
        .position(|h| h == &data.label_column)
        .or_else(|| renamed.iter().position(|h| h == &data.label_column))
        .ok_or_else(|| {
            Error::Ingest(format!("label column {:?} not found", data.label_column))
        })?;
    let id_column = match &data.id_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .or_else(|| renamed.iter().position(|h| h == name))
                .ok_or_else(|| Error::Ingest(format!("id column {name:?} not found")))?,
        ),
        None => None,
    };

    let mut rows = Vec::new();
    for (index, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Ingest(format!("row {}: {e}", index + 1)))?;
        let row_number = index + 1;
        let mut values = Vec::with_capacity(factor_columns.len());
        for (&column, def) in factor_columns.iter().zip(&config.spec.factors) {
            let raw = record.get(column).unwrap_or_default();
            values.push(parse_cell(def, raw, &data.value_map, row_number)?);
        }
        let raw_label = record.get(label_column).unwrap_or_default().trim();
        let label = if let Some(classes) = &data.class_values {
            classes.iter().position(|c| c == raw_label).ok_or_else(|| {
                Error::Ingest(format!(
                    "row {row_number}, column {}: unmapped class label {raw_label:?}",
                    data.label_column
                ))
            })?
        } else {
            let positive = data.positive_value.as_deref().unwrap_or("1");
            usize::from(raw_label == positive)
        };
        let id = match id_column {
            Some(column) => record.get(column).unwrap_or_default().to_string(),
            None => format!("row-{index}"),
        };
        let instance = Instance::with_label(values, label);
        instance.validate_against(&config.spec.factors)?;
        rows.push(DatasetRow { id, instance });
    }

    let descriptor = serde_json::to_string(&(
        &data.rename,
        &data.value_map,
        &data.label_column,
        &data.positive_value,
        &data.class_values,
        &config.spec.factors,
    ))?;
    let fingerprint = fingerprint_rows(&descriptor, &rows)?;
    Ok(Dataset {
        rows,
        provenance: Provenance { source: path.display().to_string(), fingerprint },
    })
}

/// Draws exactly `n_per_class` rows per observed class, seeded and
/// reproducible. Classes with too few rows are size errors.
pub fn balanced_sample(dataset: &Dataset, n_per_class: usize, rng: &mut EngineRng) -> Result<Dataset> {
    use rand::seq::SliceRandom;
    let mut by_class: BTreeMap<usize, Vec<&DatasetRow>> = BTreeMap::new();
    for row in &dataset.rows {
        let label = row
            .instance
            .label
            .ok_or_else(|| Error::Ingest(format!("row {} has no label", row.id)))?;
        by_class.entry(label).or_default().push(row);
    }
    let mut rows = Vec::new();
    for (class, members) in &mut by_class {
        if members.len() < n_per_class {
            return Err(Error::Size(format!(
                "class {class} has {} rows, {n_per_class} requested",
                members.len()
            )));
        }
        members.shuffle(rng);
        rows.extend(members.iter().take(n_per_class).map(|r| (*r).clone()));
    }
    let fingerprint = fingerprint_rows(
        &format!("balanced:{n_per_class}:{}", dataset.provenance.fingerprint),
        &rows,
    )?;
    Ok(Dataset {
        rows,
        provenance: Provenance {
            source: format!("{} (balanced {n_per_class}/class)", dataset.provenance.source),
            fingerprint,
        },
    })
}

// ── Base-logit resolution ─────────────────────────────────────────────

/// Resolves the task's base logit: fixed and population-rate sources convert
/// through the logit directly; query mode averages `repeats` score queries on
/// the reference instance, then converts.
pub async fn resolve_base_logit<O: Oracle + ?Sized>(
    task: &TaskSpec,
    oracle: &O,
    clamps: &ClampCounter,
) -> Result<f64> {
    match &task.base_logit {
        BaseLogitSource::Fixed { p } => logit(*p, task.clamp_eps),
        BaseLogitSource::PopulationRate { rate } => logit(*rate, task.clamp_eps),
        BaseLogitSource::QueryOracle { repeats } => {
            if *repeats == 0 {
                return Err(Error::Config("query-oracle base logit needs repeats >= 1".to_string()));
            }
            let reference = task.reference.as_ref().ok_or_else(|| {
                Error::Config("query-oracle base logit needs a reference instance".to_string())
            })?;
            let mut total = 0.0;
            for repeat in 0..*repeats {
                let query = OracleQuery {
                    kind: QueryKind::Single,
                    rendered_prompt: render_score_prompt(task, &reference.values),
                    expected: ExpectedAnswer::Probabilities { count: 1 },
                    rows: vec![crate::oracle::QueryRow::full(reference.values.clone())],
                    classes: 1,
                    meta: QueryMeta {
                        task_id: task.id.clone(),
                        instance_id: "base-logit".to_string(),
                        factor: None,
                        temperature: task.temperature,
                        nonce: (*repeats > 1).then_some(repeat as u64),
                        no_cache: false,
                    },
                };
                total += oracle.evaluate(&query).await?.probabilities[0];
            }
            let _ = clamps;
            logit(total / *repeats as f64, task.clamp_eps)
        }
    }
}

// ── Interaction aggregation ───────────────────────────────────────────

/// A value bucket: a half-open numeric range or a category list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketKind {
    /// `min <= value < max`.
    NumericRange { min: f64, max: f64 },
    Categories(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    pub kind: BucketKind,
}

impl Bucket {
    fn contains(&self, value: &FactorValue) -> bool {
        match (&self.kind, value) {
            (BucketKind::NumericRange { min, max }, FactorValue::Numeric { value, .. }) => {
                *value >= *min && *value < *max
            }
            (BucketKind::Categories(set), FactorValue::Categorical(label)) => {
                set.iter().any(|c| c == label)
            }
            _ => false,
        }
    }
}

/// Buckets for one conditioning factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucketing {
    pub factor: usize,
    pub buckets: Vec<Bucket>,
}

/// A per-instance attribution record: factor values and per-factor phis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub values: Vec<FactorValue>,
    pub phis: Vec<f64>,
}

/// Mean and count of one grid cell; empty cells stay `None` in the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStat {
    pub mean_phi: f64,
    pub count: usize,
}

/// Mean Shapley value of a target factor, conditioned on two bucketed factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionGrid {
    pub target_factor: usize,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub cells: Vec<Vec<Option<CellStat>>>,
}

fn bucket_index(bucketing: &Bucketing, value: &FactorValue, what: &str) -> Result<usize> {
    let matches: Vec<usize> = bucketing
        .buckets
        .iter()
        .enumerate()
        .filter(|(_, b)| b.contains(value))
        .map(|(i, _)| i)
        .collect();
    match matches.len() {
        1 => Ok(matches[0]),
        0 => Err(Error::Config(format!(
            "{what} value {:?} falls in no bucket; bucketings must partition observed values",
            value.render()
        ))),
        _ => Err(Error::Config(format!(
            "{what} value {:?} falls in {} buckets; buckets overlap",
            value.render(),
            matches.len()
        ))),
    }
}

/// Grid cell (a, b) = mean phi of the target factor over the records whose
/// conditioning values land in those buckets.
pub fn interaction_aggregate(
    records: &[AttributionRecord],
    target_factor: usize,
    row: &Bucketing,
    col: &Bucketing,
) -> Result<InteractionGrid> {
    let mut sums = vec![vec![(0.0f64, 0usize); col.buckets.len()]; row.buckets.len()];
    for record in records {
        let phi = *record.phis.get(target_factor).ok_or_else(|| {
            Error::input(format!("record lacks phi for factor {target_factor}"))
        })?;
        let row_value = record
            .values
            .get(row.factor)
            .ok_or_else(|| Error::input(format!("record lacks factor {}", row.factor)))?;
        let col_value = record
            .values
            .get(col.factor)
            .ok_or_else(|| Error::input(format!("record lacks factor {}", col.factor)))?;
        let r = bucket_index(row, row_value, "row")?;
        let c = bucket_index(col, col_value, "column")?;
        sums[r][c].0 += phi;
        sums[r][c].1 += 1;
    }
    let cells = sums
        .into_iter()
        .map(|cols| {
            cols.into_iter()
                .map(|(total, count)| {
                    (count > 0).then(|| CellStat { mean_phi: total / count as f64, count })
                })
                .collect()
        })
        .collect();
    Ok(InteractionGrid {
        target_factor,
        row_labels: row.buckets.iter().map(|b| b.label.clone()).collect(),
        col_labels: col.buckets.iter().map(|b| b.label.clone()).collect(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{DeterministicOracle, ScriptedOracle, SyntheticModel};
    use crate::rng::seeded;
    use crate::tabular::exact_reference_shapley;
    use std::io::Write;
    use std::path::PathBuf;

    const STROKE_CONFIG: &str = r#"
[task]
id = "stroke-mini"
question = "How likely is this patient to have a stroke?"
question_negated = "How likely is this patient to NOT have a stroke?"
k = 10

[[factors]]
name = "Gender"
kind = "categorical"

[[factors]]
name = "Age"
kind = "numeric"

[[factors]]
name = "Body Mass Index"
kind = "numeric"

[data]
label_column = "stroke"
positive_value = "1"

[data.rename]
"gender" = "Gender"
"age" = "Age"
"bmi" = "Body Mass Index"

[data.value_map."Gender"]
"0" = "Female"
"1" = "Male"

[reference]
"Gender" = "Male"
"Age" = 40.0
"Body Mass Index" = 24.0

[base_logit]
source = "fixed"
p = 0.001
"#;

    const STROKE_CSV: &str = "gender,age,bmi,stroke\n0,79,22.3,1\n1,40,24,0\n0,52,23.8,0\n1,68,31.9,1\n";

    fn write_files(dir: &Path) -> (PathBuf, PathBuf) {
        let config_path = dir.join("stroke.toml");
        std::fs::write(&config_path, STROKE_CONFIG).unwrap();
        let csv_path = dir.join("stroke.csv");
        let mut f = std::fs::File::create(&csv_path).unwrap();
        f.write_all(STROKE_CSV.as_bytes()).unwrap();
        (config_path, csv_path)
    }

    #[test]
    fn config_loads_reference_in_schema_order() {
        let dir = tempfile::tempdir().unwrap();
        let (config_path, _) = write_files(dir.path());
        let config = load_task_config(&config_path).unwrap();
        let reference = config.spec.reference.unwrap();
        assert_eq!(reference.values[0], FactorValue::categorical("Male"));
        assert_eq!(reference.values[1], FactorValue::Numeric { value: 40.0, unit: None });
        assert!(config.data.is_some());
        assert_eq!(config.spec.k, 10);
    }

    #[test]
    fn csv_loading_renames_and_maps_values() {
        let dir = tempfile::tempdir().unwrap();
        let (config_path, csv_path) = write_files(dir.path());
        let config = load_task_config(&config_path).unwrap();
        let dataset = load_csv(&csv_path, &config).unwrap();
        assert_eq!(dataset.len(), 4);
        // gender 0 → Female via the value map, bmi header → Body Mass Index
        assert_eq!(dataset.rows[0].instance.values[0], FactorValue::categorical("Female"));
        assert_eq!(
            dataset.rows[0].instance.values[2],
            FactorValue::Numeric { value: 22.3, unit: None }
        );
        assert_eq!(dataset.rows[0].instance.label, Some(1));
        assert_eq!(dataset.rows[1].instance.label, Some(0));
    }

    #[test]
    fn unmapped_categorical_value_names_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let (config_path, _) = write_files(dir.path());
        let config = load_task_config(&config_path).unwrap();
        let bad_csv = dir.path().join("bad.csv");
        std::fs::write(&bad_csv, "gender,age,bmi,stroke\n2,50,25,0\n").unwrap();
        let err = load_csv(&bad_csv, &config).unwrap_err();
        let message = err.to_string();
        assert!(message.contains("row 1"), "{message}");
        assert!(message.contains("Gender"), "{message}");
    }

    #[test]
    fn empty_value_map_passes_values_through() {
        let dir = tempfile::tempdir().unwrap();
        let config_text = STROKE_CONFIG.replace(
            "[data.value_map.\"Gender\"]\n\"0\" = \"Female\"\n\"1\" = \"Male\"\n",
            "",
        );
        let config_path = dir.path().join("passthrough.toml");
        std::fs::write(&config_path, config_text).unwrap();
        let config = load_task_config(&config_path).unwrap();
        let csv_path = dir.path().join("data.csv");
        std::fs::write(&csv_path, "gender,age,bmi,stroke\narbitrary,50,25,0\n").unwrap();
        let dataset = load_csv(&csv_path, &config).unwrap();
        assert_eq!(dataset.rows[0].instance.values[0], FactorValue::categorical("arbitrary"));
    }

    #[test]
    fn fingerprint_changes_when_a_mapping_changes() {
        let dir = tempfile::tempdir().unwrap();
        let (config_path, csv_path) = write_files(dir.path());
        let config = load_task_config(&config_path).unwrap();
        let first = load_csv(&csv_path, &config).unwrap();

        let altered = STROKE_CONFIG.replace("\"0\" = \"Female\"", "\"0\" = \"F\"");
        let altered_path = dir.path().join("altered.toml");
        std::fs::write(&altered_path, altered).unwrap();
        let altered_config = load_task_config(&altered_path).unwrap();
        let second = load_csv(&csv_path, &altered_config).unwrap();
        assert_ne!(first.provenance.fingerprint, second.provenance.fingerprint);
    }

    #[test]
    fn dataset_round_trips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let (config_path, csv_path) = write_files(dir.path());
        let config = load_task_config(&config_path).unwrap();
        let dataset = load_csv(&csv_path, &config).unwrap();
        let dump = dataset.to_jsonl().unwrap();
        let back = Dataset::from_jsonl(&dump).unwrap();
        assert_eq!(back, dataset);
    }

    #[test]
    fn balanced_sampling_is_exact_and_seeded() {
        let dir = tempfile::tempdir().unwrap();
        let (config_path, csv_path) = write_files(dir.path());
        let config = load_task_config(&config_path).unwrap();
        let dataset = load_csv(&csv_path, &config).unwrap();

        let sample = balanced_sample(&dataset, 2, &mut seeded(4)).unwrap();
        assert_eq!(sample.len(), 4);
        assert_eq!(sample.positive_rate(), 0.5);

        let again = balanced_sample(&dataset, 2, &mut seeded(4)).unwrap();
        let ids: Vec<&str> = sample.rows.iter().map(|r| r.id.as_str()).collect();
        let ids_again: Vec<&str> = again.rows.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ids_again);

        assert!(matches!(balanced_sample(&dataset, 3, &mut seeded(1)), Err(Error::Size(_))));
        let empty = balanced_sample(&dataset, 0, &mut seeded(1)).unwrap();
        assert!(empty.is_empty());
    }

    #[tokio::test]
    async fn base_logit_sources_resolve_through_the_logit() {
        let clamps = ClampCounter::new();
        let oracle = DeterministicOracle::new(SyntheticModel::additive(0.0, vec![0.0]));

        let mut task = TaskSpec::synthetic("t", 1);
        task.base_logit = BaseLogitSource::Fixed { p: 0.182 };
        let z = resolve_base_logit(&task, &oracle, &clamps).await.unwrap();
        assert!((z - -1.5029).abs() < 5e-4);
        assert_eq!(z, logit(0.182, task.clamp_eps).unwrap());

        task.base_logit = BaseLogitSource::Fixed { p: 0.5 };
        assert_eq!(resolve_base_logit(&task, &oracle, &clamps).await.unwrap(), 0.0);
    }

    #[tokio::test]
    async fn query_mode_averages_then_converts() {
        // five scripted scores averaging 0.410 → Heart Disease base logit
        let oracle = ScriptedOracle::new([
            "Answer: 0.40",
            "Answer: 0.45",
            "Answer: 0.40",
            "Answer: 0.40",
            "Answer: 0.40",
        ]);
        let mut task = TaskSpec::synthetic("t", 1);
        task.reference = Some(ReferenceInstance::new(vec![FactorValue::numeric(0.0)]));
        task.base_logit = BaseLogitSource::QueryOracle { repeats: 5 };
        let clamps = ClampCounter::new();
        let z = resolve_base_logit(&task, &oracle, &clamps).await.unwrap();
        assert!((z - -0.3640).abs() < 5e-4, "z = {z}");
    }

    #[test]
    fn single_bucket_grids_hold_the_grand_mean() {
        let records: Vec<AttributionRecord> = (0..5)
            .map(|i| AttributionRecord {
                values: vec![FactorValue::numeric(i as f64), FactorValue::numeric(0.0)],
                phis: vec![i as f64, 0.0],
            })
            .collect();
        let all = Bucketing {
            factor: 0,
            buckets: vec![Bucket {
                label: "all".to_string(),
                kind: BucketKind::NumericRange { min: -10.0, max: 10.0 },
            }],
        };
        let all_b = Bucketing { factor: 1, buckets: all.buckets.clone() };
        let grid = interaction_aggregate(&records, 0, &all, &all_b).unwrap();
        let cell = grid.cells[0][0].unwrap();
        assert_eq!(cell.count, 5);
        assert!((cell.mean_phi - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_phis_make_all_cells_equal() {
        let records: Vec<AttributionRecord> = (0..8)
            .map(|i| AttributionRecord {
                values: vec![
                    FactorValue::numeric(f64::from(i % 2)),
                    FactorValue::numeric(f64::from(i / 4)),
                ],
                phis: vec![0.7],
            })
            .collect();
        let split = |factor| Bucketing {
            factor,
            buckets: vec![
                Bucket {
                    label: "low".to_string(),
                    kind: BucketKind::NumericRange { min: -0.5, max: 0.5 },
                },
                Bucket {
                    label: "high".to_string(),
                    kind: BucketKind::NumericRange { min: 0.5, max: 1.5 },
                },
            ],
        };
        let grid = interaction_aggregate(&records, 0, &split(0), &split(1)).unwrap();
        for row in &grid.cells {
            for cell in row.iter().flatten() {
                assert!((cell.mean_phi - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn overlapping_buckets_are_a_config_error() {
        let records = vec![AttributionRecord {
            values: vec![FactorValue::numeric(0.2)],
            phis: vec![1.0],
        }];
        let overlapping = Bucketing {
            factor: 0,
            buckets: vec![
                Bucket {
                    label: "a".to_string(),
                    kind: BucketKind::NumericRange { min: 0.0, max: 1.0 },
                },
                Bucket {
                    label: "b".to_string(),
                    kind: BucketKind::NumericRange { min: 0.1, max: 2.0 },
                },
            ],
        };
        let err = interaction_aggregate(&records, 0, &overlapping, &overlapping).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn interaction_grid_recovers_the_exact_shapley_split() {
        // logit model: w0*x0 + w1*x1 + c*x0*x1 over {0,1} values; reference all zero
        let w0 = 0.3;
        let c = 0.8;
        let model = SyntheticModel::additive(0.0, vec![w0, 0.1, -0.2]).with_interaction(0, 1, c);
        let reference = ReferenceInstance::new(vec![
            FactorValue::numeric(0.0),
            FactorValue::numeric(0.0),
            FactorValue::numeric(0.0),
        ]);
        let f = |row: &[FactorValue]| {
            model.row_logit(&crate::oracle::QueryRow::full(row.to_vec()))
        };

        let mut records = Vec::new();
        for a in [0.0, 1.0] {
            for b in [0.0, 1.0] {
                let x = Instance::new(vec![
                    FactorValue::numeric(a),
                    FactorValue::numeric(b),
                    FactorValue::numeric(1.0),
                ]);
                let phis: Vec<f64> = (0..3)
                    .map(|i| exact_reference_shapley(f, &x, &reference, i).unwrap())
                    .collect();
                records.push(AttributionRecord { values: x.values, phis });
            }
        }
        let split = |factor| Bucketing {
            factor,
            buckets: vec![
                Bucket {
                    label: "low".to_string(),
                    kind: BucketKind::NumericRange { min: -0.5, max: 0.5 },
                },
                Bucket {
                    label: "high".to_string(),
                    kind: BucketKind::NumericRange { min: 0.5, max: 1.5 },
                },
            ],
        };
        let grid = interaction_aggregate(&records, 0, &split(0), &split(1)).unwrap();
        let high_high = grid.cells[1][1].unwrap().mean_phi;
        let high_low = grid.cells[1][0].unwrap().mean_phi;
        // the pairwise term splits evenly: phi0(high,high) - phi0(high,low) = c/2
        assert!((high_high - high_low - c / 2.0).abs() < 1e-10);
        let low_any = grid.cells[0][0].unwrap().mean_phi;
        assert!(low_any.abs() < 1e-12);
    }
}
