//! Tabular datasets: schema, CSV ingestion and seeded train/test splits.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("IoError: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CsvError: {0}")]
    Csv(#[from] csv::Error),
    #[error("SchemaError: {0}")]
    SchemaJson(#[from] serde_json::Error),
    #[error("InvalidSchema: {0}")]
    InvalidSchema(String),
    #[error("MissingColumn: column '{0}' not found in header")]
    MissingColumn(String),
    #[error("ParseError: row {row}, column '{column}': '{value}' is not numeric")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("UnknownLabel: row {row}: label '{label}' is not one of the two target labels")]
    UnknownLabel { row: usize, label: String },
    #[error("InvalidFraction: {0} is outside (0, 1)")]
    InvalidFraction(f64),
    #[error("TooFewRows: need at least {needed}, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("InvalidRecord: {0}")]
    InvalidRecord(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    #[serde(default = "default_actionable")]
    pub actionable: bool,
}

fn default_actionable() -> bool {
    true
}

/// Column layout of a two-class dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub target: String,
    pub positive_label: String,
    /// Optional; when absent the first non-positive label seen becomes the negative class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_label: Option<String>,
    /// Optional column holding row identifiers; row numbers are used otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_column: Option<String>,
    pub variables: Vec<VariableSpec>,
}

impl Schema {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let schema: Schema = serde_json::from_str(s)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variables.is_empty() {
            return Err(DataError::InvalidSchema("at least one variable is required".into()));
        }
        let mut seen = HashSet::new();
        for v in &self.variables {
            if v.name == self.target {
                return Err(DataError::InvalidSchema(format!(
                    "variable '{}' is also the target",
                    v.name
                )));
            }
            if Some(&v.name) == self.id_column.as_ref() {
                return Err(DataError::InvalidSchema(format!(
                    "variable '{}' is also the id column",
                    v.name
                )));
            }
            if !seen.insert(v.name.as_str()) {
                return Err(DataError::InvalidSchema(format!("duplicate variable '{}'", v.name)));
            }
        }
        if self.negative_label.as_deref() == Some(self.positive_label.as_str()) {
            return Err(DataError::InvalidSchema(
                "positive and negative labels must differ".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }
}

/// A raw cell value before discretization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawValue {
    Number(f64),
    Text(String),
    Missing,
}

impl RawValue {
    /// Parse a CSV field according to the variable kind. Blank fields are missing.
    pub fn parse(field: &str, kind: VariableKind) -> Option<RawValue> {
        let trimmed = field.trim();
        if trimmed.is_empty() {
            return Some(RawValue::Missing);
        }
        match kind {
            VariableKind::Numeric => trimmed.parse::<f64>().ok().filter(|v| v.is_finite()).map(RawValue::Number),
            VariableKind::Categorical => Some(RawValue::Text(trimmed.to_string())),
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, RawValue::Missing)
    }
}

impl fmt::Display for RawValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RawValue::Number(v) => write!(f, "{v}"),
            RawValue::Text(s) => f.write_str(s),
            RawValue::Missing => Ok(()),
        }
    }
}

/// Rows of raw values with two-class labels.
///
/// `classes[0]` is the positive label; `classes[1]`, when present, the negative
/// one. `labels[r]` indexes into `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    pub classes: Vec<String>,
    pub ids: Vec<String>,
    pub rows: Vec<Vec<RawValue>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        schema: Schema,
        classes: Vec<String>,
        ids: Vec<String>,
        rows: Vec<Vec<RawValue>>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        schema.validate()?;
        if classes.is_empty() || classes.len() > 2 || classes[0] != schema.positive_label {
            return Err(DataError::InvalidSchema(
                "classes must start with the positive label and hold at most two labels".into(),
            ));
        }
        if rows.len() != labels.len() || rows.len() != ids.len() {
            return Err(DataError::InvalidRecord(format!(
                "{} rows, {} labels, {} ids",
                rows.len(),
                labels.len(),
                ids.len()
            )));
        }
        for (r, (row, &label)) in rows.iter().zip(&labels).enumerate() {
            if row.len() != schema.len() {
                return Err(DataError::InvalidRecord(format!(
                    "row {r} has {} values, schema has {} variables",
                    row.len(),
                    schema.len()
                )));
            }
            if label >= classes.len() {
                return Err(DataError::UnknownLabel {
                    row: r,
                    label: label.to_string(),
                });
            }
        }
        Ok(Self {
            schema,
            classes,
            ids,
            rows,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Values of one variable across all rows.
    pub fn column(&self, variable: usize) -> impl Iterator<Item = &RawValue> + '_ {
        self.rows.iter().map(move |r| &r[variable])
    }

    /// `true` where the row belongs to the positive class.
    pub fn positive_flags(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l == 0).collect()
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            classes: self.classes.clone(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Read an RFC 4180 CSV file (UTF-8, comma separated, header row).
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, schema)
}

/// [`load_csv`] over any reader.
pub fn read_csv<R: std::io::Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let var_cols = schema
        .variables
        .iter()
        .map(|v| find(&v.name))
        .collect::<Result<Vec<_>>>()?;
    let target_col = find(&schema.target)?;
    let id_col = schema.id_column.as_deref().map(find).transpose()?;

    let mut classes = vec![schema.positive_label.clone()];
    if let Some(neg) = &schema.negative_label {
        classes.push(neg.clone());
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let label_text = record.get(target_col).unwrap_or("").trim();
        let label = match classes.iter().position(|c| c == label_text) {
            Some(l) => l,
            None if classes.len() < 2 && !label_text.is_empty() => {
                classes.push(label_text.to_string());
                1
            }
            None => {
                return Err(DataError::UnknownLabel {
                    row: r,
                    label: label_text.to_string(),
                })
            }
        };
        let row = schema
            .variables
            .iter()
            .zip(&var_cols)
            .map(|(spec, &c)| {
                let field = record.get(c).unwrap_or("");
                RawValue::parse(field, spec.kind).ok_or_else(|| DataError::Parse {
                    row: r,
                    column: spec.name.clone(),
                    value: field.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ids.push(match id_col {
            Some(c) => record.get(c).unwrap_or("").to_string(),
            None => r.to_string(),
        });
        rows.push(row);
        labels.push(label);
    }
    Ok(Dataset {
        schema: schema.clone(),
        classes,
        ids,
        rows,
        labels,
    })
}

/// Parse one raw record given as a JSON object keyed by variable name.
/// Absent keys and `null` are missing values.
pub fn record_from_json(schema: &Schema, value: &serde_json::Value) -> Result<Vec<RawValue>> {
    let obj = value
        .as_object()
        .ok_or_else(|| DataError::InvalidRecord("record must be a JSON object".into()))?;
    for key in obj.keys() {
        if schema.index_of(key).is_none() {
            return Err(DataError::InvalidRecord(format!("unknown variable '{key}'")));
        }
    }
    schema
        .variables
        .iter()
        .map(|spec| match obj.get(&spec.name) {
            None | Some(serde_json::Value::Null) => Ok(RawValue::Missing),
            Some(serde_json::Value::Number(n)) => match spec.kind {
                VariableKind::Numeric => Ok(RawValue::Number(n.as_f64().unwrap_or(f64::NAN))),
                VariableKind::Categorical => Ok(RawValue::Text(n.to_string())),
            },
            Some(serde_json::Value::String(s)) => {
                RawValue::parse(s, spec.kind).ok_or_else(|| DataError::Parse {
                    row: 0,
                    column: spec.name.clone(),
                    value: s.clone(),
                })
            }
            Some(other) => Err(DataError::InvalidRecord(format!(
                "unsupported value for '{}': {other}",
                spec.name
            ))),
        })
        .collect()
}

/// Row indices of a train/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffle `0..n` with `seed` and cut it at `round(train_fraction * n)`.
///
/// With `stratify_by`, each class is shuffled and cut separately, so the train
/// size is the sum of the per-class rounded sizes. Both parts are returned in
/// ascending row order.
pub fn split_indices(
    n: usize,
    train_fraction: f64,
    seed: u64,
    stratify_by: Option<&[usize]>,
) -> Result<SplitIndices> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::InvalidFraction(train_fraction));
    }
    if n < 2 {
        return Err(DataError::TooFewRows { needed: 2, got: n });
    }
    let mut rng = SeededRng::new(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut cut = |mut idx: Vec<usize>| {
        rng.shuffle(&mut idx);
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    };
    match stratify_by {
        None => cut((0..n).collect()),
        Some(labels) => {
            let mut groups: Vec<usize> = labels.to_vec();
            groups.sort_unstable();
            groups.dedup();
            for g in groups {
                cut((0..n).filter(|&i| labels[i] == g).collect());
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

/// Seeded, unstratified split; `|train| = round(train_fraction * N)`.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let idx = split_indices(dataset.len(), train_fraction, seed, None)?;
    Ok((dataset.subset(&idx.train), dataset.subset(&idx.test)))
}

/// Seeded split preserving class proportions.
pub fn split_stratified(
    dataset: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let idx = split_indices(dataset.len(), train_fraction, seed, Some(&dataset.labels))?;
    Ok((dataset.subset(&idx.train), dataset.subset(&idx.test)))
}
