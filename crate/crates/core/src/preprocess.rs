//! Supervised discretization and modality grouping.
//!
//! Every variable is reduced to a small ordered set of cells: right-closed
//! intervals for numeric variables (Fayyad–Irani MDLP cut points), groups of
//! modalities for categorical ones. Cells are the unit of change in the
//! knowledge base.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, RawValue, Schema, VariableKind};

/// Internal key of the missing modality of a categorical variable. Blank CSV
/// fields are read as missing, so no real modality can collide with it.
pub const MISSING_MODALITY: &str = "";

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("SchemaMismatch: {0}")]
    SchemaMismatch(String),
    #[error("MissingValue: variable '{variable}' has no missing cell")]
    UnseenMissing { variable: String },
    #[error("TypeMismatch: variable '{variable}' expects a {expected} value")]
    TypeMismatch { variable: String, expected: &'static str },
    #[error("CellOutOfRange: variable {variable} has {cells} cells, got {cell}")]
    CellOutOfRange { variable: usize, cell: usize, cells: usize },
    #[error("LengthMismatch: expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub max_bins: usize,
    pub min_support: usize,
    pub merge_tolerance: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            max_bins: 10,
            min_support: 16,
            merge_tolerance: 0.02,
        }
    }
}

/// Cut points of a numeric variable. Cell `q` covers `(cut[q-1], cut[q]]`;
/// the optional missing cell comes last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub variable: String,
    pub cut_points: Vec<f64>,
    pub has_missing_cell: bool,
    /// Observed training range; display only, never used for containment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_max: Option<f64>,
}

impl BinSpec {
    pub fn cell_count(&self) -> usize {
        self.cut_points.len() + 1 + usize::from(self.has_missing_cell)
    }

    pub fn interval_count(&self) -> usize {
        self.cut_points.len() + 1
    }

    pub fn missing_cell(&self) -> Option<usize> {
        self.has_missing_cell.then(|| self.cut_points.len() + 1)
    }

    /// Interval holding `v` under the right-closed convention.
    pub fn cell_of(&self, v: f64) -> usize {
        self.cut_points.partition_point(|&c| c < v)
    }

    pub fn label(&self, cell: usize) -> String {
        if Some(cell) == self.missing_cell() {
            return "(missing)".to_string();
        }
        let last = self.cut_points.len();
        let lower = if cell == 0 {
            match self.observed_min {
                Some(m) => format!("[{m}"),
                None => "]-inf".to_string(),
            }
        } else {
            format!("]{}", self.cut_points[cell - 1])
        };
        let upper = if cell == last {
            match self.observed_max {
                Some(m) => format!("{m}]"),
                None => "+inf[".to_string(),
            }
        } else {
            format!("{}]", self.cut_points[cell])
        };
        format!("{lower}-{upper}")
    }
}

/// Modality groups of a categorical variable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub variable: String,
    pub groups: Vec<Vec<String>>,
    /// Group receiving modalities never seen in training.
    pub fallback_group: usize,
}

impl GroupSpec {
    pub fn cell_count(&self) -> usize {
        self.groups.len()
    }

    pub fn cell_of(&self, modality: &str) -> usize {
        self.groups
            .iter()
            .position(|g| g.iter().any(|m| m == modality))
            .unwrap_or(self.fallback_group)
    }

    pub fn label(&self, cell: usize) -> String {
        let names: Vec<&str> = self.groups[cell]
            .iter()
            .map(|m| if m == MISSING_MODALITY { "(missing)" } else { m.as_str() })
            .collect();
        format!("[{}]", names.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VariableEncoder {
    Numeric(BinSpec),
    Categorical(GroupSpec),
}

impl VariableEncoder {
    pub fn name(&self) -> &str {
        match self {
            VariableEncoder::Numeric(b) => &b.variable,
            VariableEncoder::Categorical(g) => &g.variable,
        }
    }

    pub fn kind(&self) -> VariableKind {
        match self {
            VariableEncoder::Numeric(_) => VariableKind::Numeric,
            VariableEncoder::Categorical(_) => VariableKind::Categorical,
        }
    }

    pub fn cell_count(&self) -> usize {
        match self {
            VariableEncoder::Numeric(b) => b.cell_count(),
            VariableEncoder::Categorical(g) => g.cell_count(),
        }
    }

    pub fn label(&self, cell: usize) -> String {
        match self {
            VariableEncoder::Numeric(b) => b.label(cell),
            VariableEncoder::Categorical(g) => g.label(cell),
        }
    }

    /// Whether two cells are neighbouring intervals. Only numeric intervals
    /// have an order; the missing cell has no neighbours.
    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        match self {
            VariableEncoder::Numeric(spec) => {
                let n = spec.interval_count();
                a < n && b < n && a.abs_diff(b) == 1
            }
            VariableEncoder::Categorical(_) => false,
        }
    }

    pub fn encode_value(&self, value: &RawValue) -> Result<usize, PreprocessError> {
        match (self, value) {
            (VariableEncoder::Numeric(b), RawValue::Number(v)) => Ok(b.cell_of(*v)),
            (VariableEncoder::Numeric(b), RawValue::Missing) => {
                b.missing_cell().ok_or_else(|| PreprocessError::UnseenMissing {
                    variable: b.variable.clone(),
                })
            }
            (VariableEncoder::Numeric(b), RawValue::Text(_)) => Err(PreprocessError::TypeMismatch {
                variable: b.variable.clone(),
                expected: "numeric",
            }),
            (VariableEncoder::Categorical(g), RawValue::Text(s)) => Ok(g.cell_of(s)),
            (VariableEncoder::Categorical(g), RawValue::Number(v)) => Ok(g.cell_of(&v.to_string())),
            (VariableEncoder::Categorical(g), RawValue::Missing) => Ok(g.cell_of(MISSING_MODALITY)),
        }
    }
}

/// Cell indices of one individual, in schema order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EncodedInstance(pub Vec<usize>);

impl EncodedInstance {
    pub fn cells(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<usize>> for EncodedInstance {
    fn from(cells: Vec<usize>) -> Self {
        Self(cells)
    }
}

/// Per-variable encoders aligned with the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub variables: Vec<VariableEncoder>,
}

impl Preprocessor {
    pub fn new(variables: Vec<VariableEncoder>) -> Self {
        Self { variables }
    }

    /// Fit every schema variable on the training rows.
    pub fn fit(dataset: &Dataset, config: &PreprocessConfig) -> Self {
        let positive = dataset.positive_flags();
        let variables = dataset
            .schema
            .variables
            .iter()
            .enumerate()
            .map(|(i, spec)| match spec.kind {
                VariableKind::Numeric => {
                    let mut values = Vec::with_capacity(dataset.len());
                    let mut labels = Vec::with_capacity(dataset.len());
                    let mut any_missing = false;
                    for (v, &p) in dataset.column(i).zip(&positive) {
                        match v {
                            RawValue::Number(x) => {
                                values.push(*x);
                                labels.push(p);
                            }
                            _ => any_missing = true,
                        }
                    }
                    let mut bins = discretize_numeric(&values, &labels, config.max_bins);
                    bins.variable = spec.name.clone();
                    bins.has_missing_cell = any_missing;
                    VariableEncoder::Numeric(bins)
                }
                VariableKind::Categorical => {
                    let values: Vec<String> = dataset
                        .column(i)
                        .map(|v| match v {
                            RawValue::Missing => MISSING_MODALITY.to_string(),
                            other => other.to_string(),
                        })
                        .collect();
                    let refs: Vec<&str> = values.iter().map(String::as_str).collect();
                    let mut groups = group_categorical(
                        &refs,
                        &positive,
                        config.min_support,
                        config.merge_tolerance,
                    );
                    groups.variable = spec.name.clone();
                    VariableEncoder::Categorical(groups)
                }
            })
            .collect();
        Self { variables }
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn cell_count(&self, variable: usize) -> usize {
        self.variables[variable].cell_count()
    }

    pub fn total_cells(&self) -> usize {
        self.variables.iter().map(VariableEncoder::cell_count).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name() == name)
    }

    pub fn check_schema(&self, schema: &Schema) -> Result<(), PreprocessError> {
        if schema.len() != self.len() {
            return Err(PreprocessError::SchemaMismatch(format!(
                "schema has {} variables, preprocessor has {}",
                schema.len(),
                self.len()
            )));
        }
        for (spec, enc) in schema.variables.iter().zip(&self.variables) {
            if spec.name != enc.name() || spec.kind != enc.kind() {
                return Err(PreprocessError::SchemaMismatch(format!(
                    "variable '{}' does not match encoder '{}'",
                    spec.name,
                    enc.name()
                )));
            }
        }
        Ok(())
    }

    pub fn encode_row(&self, row: &[RawValue]) -> Result<EncodedInstance, PreprocessError> {
        if row.len() != self.len() {
            return Err(PreprocessError::LengthMismatch {
                expected: self.len(),
                got: row.len(),
            });
        }
        self.variables
            .iter()
            .zip(row)
            .map(|(enc, v)| enc.encode_value(v))
            .collect::<Result<Vec<_>, _>>()
            .map(EncodedInstance)
    }

    pub fn encode(&self, dataset: &Dataset) -> Result<Vec<EncodedInstance>, PreprocessError> {
        self.check_schema(&dataset.schema)?;
        dataset.rows.iter().map(|r| self.encode_row(r)).collect()
    }

    pub fn validate_instance(&self, x: &EncodedInstance) -> Result<(), PreprocessError> {
        if x.len() != self.len() {
            return Err(PreprocessError::LengthMismatch {
                expected: self.len(),
                got: x.len(),
            });
        }
        for (variable, (&cell, enc)) in x.0.iter().zip(&self.variables).enumerate() {
            if cell >= enc.cell_count() {
                return Err(PreprocessError::CellOutOfRange {
                    variable,
                    cell,
                    cells: enc.cell_count(),
                });
            }
        }
        Ok(())
    }
}

fn entropy(pos: usize, total: usize) -> f64 {
    if total == 0 || pos == 0 || pos == total {
        return 0.0;
    }
    let p = pos as f64 / total as f64;
    let q = 1.0 - p;
    -(p * p.log2() + q * q.log2())
}

fn class_count(pos: usize, total: usize) -> f64 {
    f64::from(u8::from(pos > 0) + u8::from(pos < total))
}

/// Best boundary of `sorted[lo..hi]` and whether MDL accepts it.
struct Candidate {
    lo: usize,
    hi: usize,
    split: usize,
    gain: f64,
}

fn best_split(values: &[f64], cum_pos: &[usize], lo: usize, hi: usize) -> Option<Candidate> {
    let n = hi - lo;
    if n < 2 {
        return None;
    }
    let pos_all = cum_pos[hi] - cum_pos[lo];
    let ent_all = entropy(pos_all, n);
    let mut best: Option<(usize, f64)> = None;
    for b in lo + 1..hi {
        if values[b - 1] >= values[b] {
            continue;
        }
        let (n1, n2) = (b - lo, hi - b);
        let p1 = cum_pos[b] - cum_pos[lo];
        let p2 = pos_all - p1;
        let weighted = (n1 as f64 * entropy(p1, n1) + n2 as f64 * entropy(p2, n2)) / n as f64;
        if best.is_none_or(|(_, w)| weighted < w) {
            best = Some((b, weighted));
        }
    }
    let (split, weighted) = best?;
    let gain = ent_all - weighted;
    let (n1, n2) = (split - lo, hi - split);
    let p1 = cum_pos[split] - cum_pos[lo];
    let p2 = pos_all - p1;
    let k = class_count(pos_all, n);
    let k1 = class_count(p1, n1);
    let k2 = class_count(p2, n2);
    let delta = (3f64.powf(k) - 2.0).log2()
        - (k * ent_all - k1 * entropy(p1, n1) - k2 * entropy(p2, n2));
    let threshold = ((n as f64 - 1.0).log2() + delta) / n as f64;
    (gain > threshold).then_some(Candidate { lo, hi, split, gain })
}

/// Fayyad–Irani MDLP cut points, at most `max_bins - 1` of them.
///
/// Accepted splits are expanded best-gain first, so the cap keeps the most
/// informative boundaries. Cut points sit halfway between adjacent distinct
/// values.
pub fn discretize_numeric(values: &[f64], positive: &[bool], max_bins: usize) -> BinSpec {
    assert_eq!(values.len(), positive.len(), "values and labels differ in length");
    let mut pairs: Vec<(f64, bool)> = values.iter().copied().zip(positive.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let sorted: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut cum_pos = Vec::with_capacity(pairs.len() + 1);
    cum_pos.push(0usize);
    for &(_, p) in &pairs {
        cum_pos.push(cum_pos.last().unwrap() + usize::from(p));
    }

    let max_cuts = max_bins.saturating_sub(1);
    let mut cuts: Vec<f64> = Vec::new();
    let mut pending: Vec<Candidate> = best_split(&sorted, &cum_pos, 0, sorted.len()).into_iter().collect();
    while cuts.len() < max_cuts && !pending.is_empty() {
        let pick = pending
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.gain.total_cmp(&b.gain).then(b.split.cmp(&a.split)))
            .map(|(i, _)| i)
            .unwrap();
        let c = pending.swap_remove(pick);
        cuts.push((sorted[c.split - 1] + sorted[c.split]) / 2.0);
        pending.extend(best_split(&sorted, &cum_pos, c.lo, c.split));
        pending.extend(best_split(&sorted, &cum_pos, c.split, c.hi));
    }
    cuts.sort_by(f64::total_cmp);
    BinSpec {
        variable: String::new(),
        cut_points: cuts,
        has_missing_cell: false,
        observed_min: sorted.first().copied(),
        observed_max: sorted.last().copied(),
    }
}

#[derive(Debug, Clone)]
struct Group {
    members: Vec<String>,
    count: usize,
    pos: usize,
}

impl Group {
    fn rate(&self) -> f64 {
        self.pos as f64 / self.count as f64
    }
}

/// Greedy grouping of categorical modalities by positive-class rate.
///
/// Modalities with at least `min_support` rows start as singleton groups; the
/// closest pair of groups is merged while their rates differ by at most
/// `merge_tolerance`. Modalities below `min_support` then join the group with
/// the nearest rate. Ties resolve to the lexicographically first group.
pub fn group_categorical(
    values: &[&str],
    positive: &[bool],
    min_support: usize,
    merge_tolerance: f64,
) -> GroupSpec {
    assert_eq!(values.len(), positive.len(), "values and labels differ in length");
    let min_support = min_support.max(1);
    let mut stats: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (&v, &p) in values.iter().zip(positive) {
        let e = stats.entry(v).or_default();
        e.0 += 1;
        e.1 += usize::from(p);
    }

    let (large, small): (Vec<_>, Vec<_>) = stats.iter().partition(|(_, (c, _))| *c >= min_support);
    let mut groups: Vec<Group> = large
        .iter()
        .map(|(m, (c, p))| Group {
            members: vec![m.to_string()],
            count: *c,
            pos: *p,
        })
        .collect();

    if groups.is_empty() {
        let members: Vec<String> = stats.keys().map(|m| m.to_string()).collect();
        let groups = if members.is_empty() { vec![] } else { vec![members] };
        return GroupSpec {
            variable: String::new(),
            groups,
            fallback_group: 0,
        };
    }

    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..groups.len() {
            for j in i + 1..groups.len() {
                let d = (groups[i].rate() - groups[j].rate()).abs();
                if best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((i, j, d));
                }
            }
        }
        match best {
            Some((i, j, d)) if d <= merge_tolerance => {
                let g = groups.remove(j);
                let target = &mut groups[i];
                target.members.extend(g.members);
                target.members.sort();
                target.count += g.count;
                target.pos += g.pos;
            }
            _ => break,
        }
    }

    let rates: Vec<f64> = groups.iter().map(Group::rate).collect();
    for (m, (c, p)) in small {
        let rate = *p as f64 / *c as f64;
        let nearest = rates
            .iter()
            .enumerate()
            .min_by(|(ia, a), (ib, b)| (rate - **a).abs().total_cmp(&(rate - **b).abs()).then(ia.cmp(ib)))
            .map(|(i, _)| i)
            .unwrap();
        let g = &mut groups[nearest];
        g.members.push(m.to_string());
        g.members.sort();
        g.count += c;
        g.pos += p;
    }

    groups.sort_by(|a, b| a.members[0].cmp(&b.members[0]));
    let fallback_group = groups
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.count.cmp(&b.count).then(ib.cmp(ia)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    GroupSpec {
        variable: String::new(),
        groups: groups.into_iter().map(|g| g.members).collect(),
        fallback_group,
    }
}
