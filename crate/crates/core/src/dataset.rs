//! Tabular ingestion: schema handling, complete-case CSV loading, train-only
//! encoding into a design matrix, and seeded train/test splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeType {
    Binary,
    Continuous,
    Count,
    Multiclass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

/// Column roles for a dataset. Serialized with the keys `outcome`,
/// `outcome_type`, `sensitive`, `features`, `positive_label` and
/// `class_labels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    #[serde(rename = "outcome")]
    pub outcome_column: String,
    pub outcome_type: OutcomeType,
    #[serde(rename = "sensitive")]
    pub sensitive_column: String,
    #[serde(rename = "features")]
    pub feature_columns: Vec<FeatureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_label: Option<String>,
    /// Ordered class labels for multiclass outcomes; the first one is the
    /// reference class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_labels: Option<Vec<String>>,
}

impl DatasetSchema {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let schema: DatasetSchema = serde_json::from_str(s)
            .map_err(|e| Error::Schema(format!("invalid schema document: {e}")))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_columns.is_empty() {
            return Err(Error::Schema("at least one feature column is required".into()));
        }
        let mut seen = BTreeSet::new();
        for f in &self.feature_columns {
            if f.name == self.sensitive_column {
                return Err(Error::Schema(format!(
                    "sensitive column `{}` cannot be a feature",
                    f.name
                )));
            }
            if f.name == self.outcome_column {
                return Err(Error::Schema(format!(
                    "outcome column `{}` cannot be a feature",
                    f.name
                )));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("feature `{}` listed twice", f.name)));
            }
        }
        if self.sensitive_column == self.outcome_column {
            return Err(Error::Schema(
                "outcome and sensitive attribute must be different columns".into(),
            ));
        }
        if let Some(labels) = &self.class_labels {
            let unique: BTreeSet<_> = labels.iter().collect();
            if unique.len() != labels.len() || labels.len() < 2 {
                return Err(Error::Schema(
                    "class_labels must hold at least two distinct labels".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawValue {
    Number(f64),
    Level(String),
}

/// One complete row. `outcome` is already numeric: 0/1 for binary, a class
/// index for multiclass, the raw value otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub outcome: f64,
    pub group: String,
    pub features: Vec<RawValue>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    schema: DatasetSchema,
    records: Vec<Record>,
    class_labels: Vec<String>,
    dropped: usize,
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "?" | "NA" | "na" | "NaN" | "nan" | "null")
}

impl Dataset {
    /// Builds a dataset from already-parsed records. Multiclass outcomes must
    /// be class indices into `class_labels`.
    pub fn from_records(
        schema: DatasetSchema,
        records: Vec<Record>,
        class_labels: Vec<String>,
    ) -> Result<Self> {
        schema.validate()?;
        if records.is_empty() {
            return Err(Error::EmptyDataset("<records>".into()));
        }
        Ok(Dataset {
            schema,
            records,
            class_labels,
            dropped: 0,
        })
    }

    pub fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of rows filtered out at load time for having a missing field.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Resolved class labels (multiclass only; empty otherwise).
    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    /// Sorted distinct values of the sensitive attribute.
    pub fn group_names(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.group.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            class_labels: self.class_labels.clone(),
            dropped: 0,
        }
    }
}

/// Loads a CSV file, keeping only rows with a value in every schema column.
pub fn load_csv(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let data = read_csv(file, schema).map_err(|e| match e {
        Error::EmptyDataset(_) => Error::EmptyDataset(path.display().to_string()),
        other => other,
    })?;
    if data.dropped > 0 {
        log::info!(
            "{}: kept {} complete rows, dropped {} incomplete",
            path.display(),
            data.len(),
            data.dropped
        );
    }
    Ok(data)
}

/// Same as [`load_csv`] for any reader.
pub fn read_csv<R: Read>(reader: R, schema: &DatasetSchema) -> Result<Dataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
    };
    let outcome_idx = column(&schema.outcome_column)?;
    let sensitive_idx = column(&schema.sensitive_column)?;
    let feature_idx = schema
        .feature_columns
        .iter()
        .map(|f| column(&f.name))
        .collect::<Result<Vec<_>>>()?;

    let mut raw_rows = Vec::new();
    let mut dropped = 0usize;
    for (row, result) in rdr.records().enumerate() {
        let rec = result?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let needed = std::iter::once(outcome_idx)
            .chain(std::iter::once(sensitive_idx))
            .chain(feature_idx.iter().copied());
        if needed.into_iter().any(|i| is_missing(get(i))) {
            dropped += 1;
            continue;
        }
        let mut features = Vec::with_capacity(feature_idx.len());
        for (spec, &i) in schema.feature_columns.iter().zip(&feature_idx) {
            let field = get(i);
            features.push(match spec.kind {
                FeatureKind::Continuous => RawValue::Number(parse_number(field, row, &spec.name)?),
                FeatureKind::Categorical => RawValue::Level(field.to_string()),
            });
        }
        raw_rows.push((row, get(outcome_idx).to_string(), get(sensitive_idx).to_string(), features));
    }
    if raw_rows.is_empty() {
        return Err(Error::EmptyDataset("<reader>".into()));
    }

    let class_labels = match schema.outcome_type {
        OutcomeType::Multiclass => match &schema.class_labels {
            Some(labels) => labels.clone(),
            None => {
                let set: BTreeSet<&str> = raw_rows.iter().map(|r| r.1.as_str()).collect();
                set.into_iter().map(String::from).collect()
            }
        },
        _ => Vec::new(),
    };

    let mut records = Vec::with_capacity(raw_rows.len());
    for (row, outcome, group, features) in raw_rows {
        let outcome = parse_outcome(&outcome, row, schema, &class_labels)?;
        records.push(Record {
            outcome,
            group,
            features,
        });
    }
    Ok(Dataset {
        schema: schema.clone(),
        records,
        class_labels,
        dropped,
    })
}

fn parse_number(field: &str, row: usize, column: &str) -> Result<f64> {
    match field.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Row {
            row,
            column: column.to_string(),
            message: format!("cannot parse `{field}` as a number"),
        }),
    }
}

fn parse_outcome(
    field: &str,
    row: usize,
    schema: &DatasetSchema,
    class_labels: &[String],
) -> Result<f64> {
    let column = &schema.outcome_column;
    let bad = |message: String| Error::Row {
        row,
        column: column.clone(),
        message,
    };
    match schema.outcome_type {
        OutcomeType::Binary => match &schema.positive_label {
            Some(pos) => Ok(if field == pos { 1.0 } else { 0.0 }),
            None => match parse_number(field, row, column)? {
                v if v == 0.0 || v == 1.0 => Ok(v),
                v => Err(bad(format!("binary outcome must be 0 or 1, got {v}"))),
            },
        },
        OutcomeType::Continuous => parse_number(field, row, column),
        OutcomeType::Count => {
            let v = parse_number(field, row, column)?;
            if v < 0.0 || v.fract() != 0.0 {
                Err(bad(format!("count outcome must be a non-negative integer, got {v}")))
            } else {
                Ok(v)
            }
        }
        OutcomeType::Multiclass => class_labels
            .iter()
            .position(|l| l == field)
            .map(|i| i as f64)
            .ok_or_else(|| bad(format!("unknown class label `{field}`"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnEncoder {
    Continuous {
        name: String,
        mean: f64,
        sd: f64,
        /// False for zero-variance columns, which are passed through as-is.
        standardized: bool,
    },
    Categorical {
        name: String,
        /// Sorted levels seen in training; the first is the dropped reference.
        levels: Vec<String>,
    },
}

impl ColumnEncoder {
    fn width(&self) -> usize {
        match self {
            ColumnEncoder::Continuous { .. } => 1,
            ColumnEncoder::Categorical { levels, .. } => levels.len().saturating_sub(1),
        }
    }
}

/// Everything learned from the training split that is needed to transform
/// further data the same way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    pub columns: Vec<ColumnEncoder>,
    pub column_names: Vec<String>,
    pub group_names: Vec<String>,
    pub outcome_type: OutcomeType,
    pub class_labels: Vec<String>,
    pub warnings: Vec<String>,
}

impl EncoderState {
    pub fn fit(train: &Dataset) -> Result<Self> {
        let schema = train.schema();
        let n = train.len();
        if n == 0 {
            return Err(Error::EmptyDataset("<train>".into()));
        }
        let mut columns = Vec::with_capacity(schema.feature_columns.len());
        let mut warnings = Vec::new();
        for (j, spec) in schema.feature_columns.iter().enumerate() {
            match spec.kind {
                FeatureKind::Continuous => {
                    let values: Vec<f64> = train
                        .records()
                        .iter()
                        .map(|r| match &r.features[j] {
                            RawValue::Number(v) => *v,
                            RawValue::Level(_) => f64::NAN,
                        })
                        .collect();
                    if values.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Schema(format!(
                            "continuous feature `{}` holds non-numeric values",
                            spec.name
                        )));
                    }
                    let mean = values.iter().sum::<f64>() / n as f64;
                    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    let sd = var.sqrt();
                    let constant = values.iter().all(|v| *v == values[0])
                        || sd <= 1e-12 * (1.0 + mean.abs());
                    if constant {
                        let msg = format!(
                            "feature `{}` has zero variance in training data; left unstandardized",
                            spec.name
                        );
                        warn!("{msg}");
                        warnings.push(msg);
                    }
                    columns.push(ColumnEncoder::Continuous {
                        name: spec.name.clone(),
                        mean,
                        sd,
                        standardized: !constant,
                    });
                }
                FeatureKind::Categorical => {
                    let levels: BTreeSet<String> = train
                        .records()
                        .iter()
                        .map(|r| match &r.features[j] {
                            RawValue::Level(s) => s.clone(),
                            RawValue::Number(v) => v.to_string(),
                        })
                        .collect();
                    columns.push(ColumnEncoder::Categorical {
                        name: spec.name.clone(),
                        levels: levels.into_iter().collect(),
                    });
                }
            }
        }
        let mut column_names = vec!["(intercept)".to_string()];
        for c in &columns {
            match c {
                ColumnEncoder::Continuous { name, .. } => column_names.push(name.clone()),
                ColumnEncoder::Categorical { name, levels } => {
                    for level in levels.iter().skip(1) {
                        column_names.push(format!("{name}={level}"));
                    }
                }
            }
        }
        let group_names = train.group_names();
        if group_names.len() < 2 {
            return Err(Error::Config(format!(
                "sensitive attribute `{}` has fewer than two groups in training data",
                schema.sensitive_column
            )));
        }
        Ok(EncoderState {
            columns,
            column_names,
            group_names,
            outcome_type: schema.outcome_type,
            class_labels: train.class_labels().to_vec(),
            warnings,
        })
    }

    /// Width of the design matrix, intercept included.
    pub fn width(&self) -> usize {
        1 + self.columns.iter().map(ColumnEncoder::width).sum::<usize>()
    }

    pub fn transform(&self, data: &Dataset) -> Result<EncodedMatrix> {
        let n = data.len();
        let p = self.width();
        let mut x = DMatrix::<f64>::zeros(n, p);
        let mut y = DVector::<f64>::zeros(n);
        let mut groups = Vec::with_capacity(n);
        let sensitive = &data.schema().sensitive_column;
        for (i, rec) in data.records().iter().enumerate() {
            x[(i, 0)] = 1.0;
            let mut col = 1;
            for (enc, raw) in self.columns.iter().zip(&rec.features) {
                match (enc, raw) {
                    (
                        ColumnEncoder::Continuous {
                            mean,
                            sd,
                            standardized,
                            ..
                        },
                        RawValue::Number(v),
                    ) => {
                        x[(i, col)] = if *standardized { (v - mean) / sd } else { *v };
                    }
                    (ColumnEncoder::Categorical { levels, .. }, raw) => {
                        let level = match raw {
                            RawValue::Level(s) => s.clone(),
                            RawValue::Number(v) => v.to_string(),
                        };
                        // levels unseen in training fall back to the reference (all zeros)
                        if let Ok(pos) = levels[1..].binary_search(&level) {
                            x[(i, col + pos)] = 1.0;
                        }
                    }
                    (ColumnEncoder::Continuous { name, .. }, RawValue::Level(s)) => {
                        return Err(Error::Row {
                            row: i,
                            column: name.clone(),
                            message: format!("expected a number, got `{s}`"),
                        })
                    }
                }
                col += enc.width();
            }
            y[i] = rec.outcome;
            let g = self
                .group_names
                .binary_search(&rec.group)
                .map_err(|_| Error::Row {
                    row: i,
                    column: sensitive.clone(),
                    message: format!("group `{}` does not occur in training data", rec.group),
                })?;
            groups.push(g);
        }
        Ok(EncodedMatrix {
            x,
            y,
            groups,
            group_names: self.group_names.clone(),
            encoder: self.clone(),
        })
    }

    /// Inverse of the feature encoding for one design-matrix row.
    pub fn decode_row(&self, row: &[f64]) -> Vec<RawValue> {
        let mut col = 1;
        let mut out = Vec::with_capacity(self.columns.len());
        for enc in &self.columns {
            match enc {
                ColumnEncoder::Continuous {
                    mean,
                    sd,
                    standardized,
                    ..
                } => {
                    let v = row[col];
                    out.push(RawValue::Number(if *standardized { v * sd + mean } else { v }));
                }
                ColumnEncoder::Categorical { levels, .. } => {
                    let hot = (0..levels.len().saturating_sub(1)).find(|&k| row[col + k] == 1.0);
                    let level = hot.map_or(&levels[0], |k| &levels[k + 1]);
                    out.push(RawValue::Level(level.clone()));
                }
            }
            col += enc.width();
        }
        out
    }
}

/// Numeric form of a dataset: intercept-led design matrix, outcomes and group
/// indices into `group_names`.
#[derive(Debug, Clone)]
pub struct EncodedMatrix {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub groups: Vec<usize>,
    pub group_names: Vec<String>,
    pub encoder: EncoderState,
}

impl EncodedMatrix {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_groups(&self) -> usize {
        self.group_names.len()
    }
}

/// Fits the encoder on `train` only and applies it to both splits.
pub fn encode(train: &Dataset, test: &Dataset) -> Result<(EncodedMatrix, EncodedMatrix)> {
    if train.schema() != test.schema() {
        return Err(Error::Config("train and test datasets use different schemas".into()));
    }
    let state = EncoderState::fit(train)?;
    Ok((state.transform(train)?, state.transform(test)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Stratified on (group, outcome stratum); every group with at least two
    /// rows lands in both halves.
    #[default]
    Stratified,
    /// Uniform random permutation.
    Random,
}

/// Partitions `data` into `(train, test)` with `round(n * test_fraction)`
/// test rows. Stratified mode moves that count into the range where every
/// group with at least two rows can appear in both halves. Rows keep their
/// original relative order in both halves.
pub fn split(
    data: &Dataset,
    test_fraction: f64,
    seed: u64,
    mode: SplitMode,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = data.len();
    let target = ((n as f64 * test_fraction).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_idx = match mode {
        SplitMode::Random => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            all.truncate(target);
            all
        }
        SplitMode::Stratified => stratified_test_indices(data, test_fraction, target, &mut rng),
    };
    test_idx.sort_unstable();
    let mut in_test = vec![false; n];
    for &i in &test_idx {
        in_test[i] = true;
    }
    let train_idx: Vec<usize> = (0..n).filter(|&i| !in_test[i]).collect();
    Ok((data.subset(&train_idx), data.subset(&test_idx)))
}

/// Largest-remainder allocation of `total` units over buckets with quotas and
/// per-bucket bounds. Ties go to the earlier bucket.
fn allocate(quotas: &[f64], lo: &[usize], hi: &[usize], total: usize) -> Vec<usize> {
    let mut alloc: Vec<usize> = quotas
        .iter()
        .zip(lo.iter().zip(hi))
        .map(|(q, (&l, &h))| (q.floor() as usize).clamp(l, h))
        .collect();
    let mut assigned: usize = alloc.iter().sum();
    while assigned < total {
        let pick = (0..alloc.len())
            .filter(|&b| alloc[b] < hi[b])
            .max_by(|&a, &b| {
                let ra = quotas[a] - alloc[a] as f64;
                let rb = quotas[b] - alloc[b] as f64;
                ra.total_cmp(&rb).then(b.cmp(&a))
            });
        match pick {
            Some(b) => {
                alloc[b] += 1;
                assigned += 1;
            }
            None => break,
        }
    }
    while assigned > total {
        let pick = (0..alloc.len())
            .filter(|&b| alloc[b] > lo[b])
            .min_by(|&a, &b| {
                let ra = quotas[a] - alloc[a] as f64;
                let rb = quotas[b] - alloc[b] as f64;
                ra.total_cmp(&rb).then(b.cmp(&a))
            });
        match pick {
            Some(b) => {
                alloc[b] -= 1;
                assigned -= 1;
            }
            None => break,
        }
    }
    alloc
}

const CONTINUOUS_STRATA: usize = 4;

fn stratified_test_indices(
    data: &Dataset,
    fraction: f64,
    target: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in data.records().iter().enumerate() {
        by_group.entry(r.group.as_str()).or_default().push(i);
    }
    let sizes: Vec<usize> = by_group.values().map(Vec::len).collect();
    let quotas: Vec<f64> = sizes.iter().map(|&s| s as f64 * fraction).collect();
    let lo: Vec<usize> = sizes.iter().map(|&s| usize::from(s >= 2)).collect();
    let hi: Vec<usize> = sizes.iter().map(|&s| if s >= 2 { s - 1 } else { 0 }).collect();
    let per_group = allocate(&quotas, &lo, &hi, target);

    let discrete = matches!(
        data.schema().outcome_type,
        OutcomeType::Binary | OutcomeType::Multiclass
    );
    let mut test = Vec::with_capacity(target);
    for ((name, rows), &take) in by_group.iter().zip(&per_group) {
        if rows.len() == 1 {
            warn!("group `{name}` has a single row; it is kept in the training split");
        }
        let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        if discrete {
            for &i in rows {
                strata
                    .entry(data.records()[i].outcome as usize)
                    .or_default()
                    .push(i);
            }
        } else {
            let mut ranked = rows.clone();
            ranked.sort_by(|&a, &b| {
                data.records()[a]
                    .outcome
                    .total_cmp(&data.records()[b].outcome)
                    .then(a.cmp(&b))
            });
            let m = ranked.len();
            for (rank, i) in ranked.into_iter().enumerate() {
                strata
                    .entry(rank * CONTINUOUS_STRATA / m)
                    .or_default()
                    .push(i);
            }
        }
        let sizes: Vec<usize> = strata.values().map(Vec::len).collect();
        let quotas: Vec<f64> = sizes.iter().map(|&s| s as f64 * fraction).collect();
        let lo = vec![0; sizes.len()];
        let per_stratum = allocate(&quotas, &lo, &sizes, take);
        for (mut members, k) in strata.into_values().zip(per_stratum) {
            members.shuffle(rng);
            test.extend_from_slice(&members[..k]);
        }
    }
    test
}
