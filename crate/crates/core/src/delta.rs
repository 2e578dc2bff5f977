//! Δ scores and the knowledge base built from them.
//!
//! `Δ(x, x')` is the change in positive-class log-odds when `x` becomes `x'`.
//! Under naive Bayes it decomposes into one term per changed variable,
//! `W_i (r_i(x'_i) - r_i(x_i))` with `r_i` the per-cell log-likelihood ratio,
//! so single-variable changes can be tabulated once and summed later.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nbmodel::{sigmoid, NBModel};
use crate::preprocess::{EncodedInstance, PreprocessError};

pub const KB_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DeltaError {
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("DuplicateVariable: variable {0} appears more than once in the change set")]
    DuplicateVariable(usize),
    #[error("DuplicateId: row id '{0}' appears more than once")]
    DuplicateId(String),
    #[error("LengthMismatch: {0}")]
    LengthMismatch(String),
    #[error("FingerprintMismatch: expected model {expected}, knowledge base was built from {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("FormatError: {0}")]
    Format(String),
    #[error("IoError: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("FormatError: {0}")]
    Csv(#[from] csv::Error),
    #[error("FormatError: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DeltaError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Change {
    pub variable: usize,
    pub cell: usize,
}

/// Target cells for a set of distinct variables.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Change>", into = "Vec<Change>")]
pub struct ChangeSet(Vec<Change>);

impl ChangeSet {
    pub fn new(changes: Vec<Change>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &changes {
            if !seen.insert(c.variable) {
                return Err(DeltaError::DuplicateVariable(c.variable));
            }
        }
        Ok(Self(changes))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn changes(&self) -> &[Change] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Copy of `x` with every change applied.
    pub fn apply(&self, x: &EncodedInstance) -> EncodedInstance {
        let mut out = x.clone();
        for c in &self.0 {
            out.0[c.variable] = c.cell;
        }
        out
    }
}

impl TryFrom<Vec<Change>> for ChangeSet {
    type Error = DeltaError;

    fn try_from(v: Vec<Change>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ChangeSet> for Vec<Change> {
    fn from(c: ChangeSet) -> Self {
        c.0
    }
}

fn check_change(model: &NBModel, c: Change) -> Result<(), PreprocessError> {
    let d = model.num_variables();
    if c.variable >= d {
        return Err(PreprocessError::LengthMismatch {
            expected: d,
            got: c.variable + 1,
        });
    }
    let cells = model.preprocessor.cell_count(c.variable);
    if c.cell >= cells {
        return Err(PreprocessError::CellOutOfRange {
            variable: c.variable,
            cell: c.cell,
            cells,
        });
    }
    Ok(())
}

/// Log-odds change of moving variable `variable` of `x` to `cell`.
pub fn delta_univariate(model: &NBModel, x: &EncodedInstance, variable: usize, cell: usize) -> Result<f64> {
    model.check_instance(x)?;
    check_change(model, Change { variable, cell })?;
    Ok(delta_unchecked(model, x, variable, cell))
}

fn delta_unchecked(model: &NBModel, x: &EncodedInstance, variable: usize, cell: usize) -> f64 {
    let from = x.cells()[variable];
    if from == cell {
        return 0.0;
    }
    model.weights[variable] * (model.log_ratio(variable, cell) - model.log_ratio(variable, from))
}

/// Sum of the univariate Δ of every change.
pub fn delta_set(model: &NBModel, x: &EncodedInstance, changes: &ChangeSet) -> Result<f64> {
    model.check_instance(x)?;
    for &c in changes.changes() {
        check_change(model, c)?;
    }
    Ok(changes
        .changes()
        .iter()
        .map(|c| delta_unchecked(model, x, c.variable, c.cell))
        .sum())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbColumn {
    pub variable: usize,
    pub name: String,
    pub cell: usize,
}

impl KbColumn {
    /// CSV header label, `<variable>:<cell>`.
    pub fn header(&self) -> String {
        format!("{}:{}", self.name, self.cell)
    }
}

/// Every cell of every variable with a non-zero weight.
pub fn kb_columns(model: &NBModel) -> Vec<KbColumn> {
    model
        .included_variables()
        .into_iter()
        .flat_map(|i| {
            let name = model.preprocessor.variables[i].name().to_string();
            (0..model.preprocessor.cell_count(i)).map(move |q| KbColumn {
                variable: i,
                name: name.clone(),
                cell: q,
            })
        })
        .collect()
}

/// Per-individual Δ of every single-cell change.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTable {
    pub fingerprint: String,
    pub positive_label: String,
    pub columns: Vec<KbColumn>,
    pub row_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub factual_cells: Vec<EncodedInstance>,
    pub base_logit: Vec<f64>,
}

/// Borrowed view of one knowledge-base row.
#[derive(Debug, Clone, Copy)]
pub struct KbRow<'a> {
    pub fingerprint: &'a str,
    pub columns: &'a [KbColumn],
    pub id: &'a str,
    pub values: &'a [f64],
    pub factual: &'a EncodedInstance,
    pub base_logit: f64,
}

impl KbRow<'_> {
    /// Largest Δ per variable: `(variable, cell, Δ)`, lowest cell on ties.
    pub fn best_per_variable(&self) -> Vec<(usize, usize, f64)> {
        let mut best: Vec<(usize, usize, f64)> = Vec::new();
        for (col, &v) in self.columns.iter().zip(self.values) {
            match best.last_mut() {
                Some(b) if b.0 == col.variable => {
                    if v > b.2 {
                        *b = (col.variable, col.cell, v);
                    }
                }
                _ => best.push((col.variable, col.cell, v)),
            }
        }
        best
    }

    /// Posterior changes `σ(base + Δ) - σ(base)`. These do not add up across
    /// variables; only the log-odds Δ are additive.
    pub fn probability_deltas(&self) -> Vec<f64> {
        let p0 = sigmoid(self.base_logit);
        self.values.iter().map(|d| sigmoid(self.base_logit + d) - p0).collect()
    }
}

/// Fill the knowledge base for `individuals`.
pub fn build_kb(model: &NBModel, individuals: &[EncodedInstance], ids: &[String]) -> Result<DeltaTable> {
    if individuals.len() != ids.len() {
        return Err(DeltaError::LengthMismatch(format!(
            "{} individuals, {} ids",
            individuals.len(),
            ids.len()
        )));
    }
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(DeltaError::DuplicateId(id.clone()));
        }
    }
    for x in individuals {
        model.check_instance(x)?;
    }
    let columns = kb_columns(model);
    let rows: Vec<(Vec<f64>, f64)> = individuals
        .par_iter()
        .map(|x| {
            let values = columns
                .iter()
                .map(|c| delta_unchecked(model, x, c.variable, c.cell))
                .collect();
            (values, model.score_logit_unchecked(x))
        })
        .collect();
    let (values, base_logit) = rows.into_iter().unzip();
    Ok(DeltaTable {
        fingerprint: model.fingerprint(),
        positive_label: model.positive_label().to_string(),
        columns,
        row_ids: ids.to_vec(),
        values,
        factual_cells: individuals.to_vec(),
        base_logit,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct KbMetadata {
    format_version: u32,
    fingerprint: String,
    positive_label: String,
    columns: Vec<KbColumn>,
    row_ids: Vec<String>,
    factual_cells: Vec<EncodedInstance>,
    base_logit: Vec<f64>,
}

impl DeltaTable {
    pub fn len(&self) -> usize {
        self.row_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }

    pub fn row_index(&self, id: &str) -> Option<usize> {
        self.row_ids.iter().position(|r| r == id)
    }

    pub fn row(&self, index: usize) -> KbRow<'_> {
        KbRow {
            fingerprint: &self.fingerprint,
            columns: &self.columns,
            id: &self.row_ids[index],
            values: &self.values[index],
            factual: &self.factual_cells[index],
            base_logit: self.base_logit[index],
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = KbRow<'_>> + '_ {
        (0..self.len()).map(|i| self.row(i))
    }

    /// Distinct variables present in the columns, in column order.
    pub fn variables(&self) -> Vec<usize> {
        let mut vars: Vec<usize> = self.columns.iter().map(|c| c.variable).collect();
        vars.dedup();
        vars
    }

    pub fn check_fingerprint(&self, expected: &str) -> Result<()> {
        if self.fingerprint != expected {
            return Err(DeltaError::FingerprintMismatch {
                expected: expected.to_string(),
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// Sidecar metadata path for a KB CSV path.
    pub fn metadata_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string()];
        header.extend(self.columns.iter().map(KbColumn::header));
        w.write_record(&header)?;
        for (id, row) in self.row_ids.iter().zip(&self.values) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|source| DeltaError::Io {
            path: "<csv>".into(),
            source,
        })
    }

    fn metadata_json(&self) -> String {
        let meta = KbMetadata {
            format_version: KB_FORMAT_VERSION,
            fingerprint: self.fingerprint.clone(),
            positive_label: self.positive_label.clone(),
            columns: self.columns.clone(),
            row_ids: self.row_ids.clone(),
            factual_cells: self.factual_cells.clone(),
            base_logit: self.base_logit.clone(),
        };
        serde_json::to_string_pretty(&meta).expect("metadata serializes")
    }

    /// Write `path` (CSV) and `path.meta.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |p: &Path| {
            let p = p.display().to_string();
            move |source| DeltaError::Io { path: p, source }
        };
        let file = std::fs::File::create(path).map_err(io(path))?;
        self.write_csv(std::io::BufWriter::new(file))?;
        let meta_path = Self::metadata_path(path);
        std::fs::write(&meta_path, self.metadata_json()).map_err(io(&meta_path))?;
        Ok(())
    }

    /// Read a saved table; with `expected_fingerprint`, refuse tables built
    /// from another model.
    pub fn load(path: impl AsRef<Path>, expected_fingerprint: Option<&str>) -> Result<Self> {
        let path = path.as_ref();
        let meta_path = Self::metadata_path(path);
        let meta_text = std::fs::read_to_string(&meta_path).map_err(|source| DeltaError::Io {
            path: meta_path.display().to_string(),
            source,
        })?;
        let file = std::fs::File::open(path).map_err(|source| DeltaError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let table = Self::from_parts(std::io::BufReader::new(file), &meta_text)?;
        if let Some(expected) = expected_fingerprint {
            table.check_fingerprint(expected)?;
        }
        Ok(table)
    }

    /// Parse a table from its CSV body and metadata JSON.
    pub fn from_parts<R: std::io::Read>(csv_reader: R, metadata: &str) -> Result<Self> {
        let meta: KbMetadata = serde_json::from_str(metadata)?;
        if meta.format_version != KB_FORMAT_VERSION {
            return Err(DeltaError::Format(format!(
                "unsupported knowledge base version {}",
                meta.format_version
            )));
        }
        let n = meta.row_ids.len();
        if meta.factual_cells.len() != n || meta.base_logit.len() != n {
            return Err(DeltaError::Format("metadata row counts disagree".into()));
        }
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(csv_reader);
        let header = rdr.headers()?.clone();
        let expected: Vec<String> = std::iter::once("id".to_string())
            .chain(meta.columns.iter().map(KbColumn::header))
            .collect();
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(DeltaError::Format("CSV header does not match metadata columns".into()));
        }
        let mut values = Vec::with_capacity(n);
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if r >= n || rec.get(0) != Some(meta.row_ids[r].as_str()) {
                return Err(DeltaError::Format(format!("row {r} id does not match metadata")));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| DeltaError::Format(format!("row {r}: '{f}' is not a number")))
                })
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        if values.len() != n {
            return Err(DeltaError::Format(format!("expected {n} rows, found {}", values.len())));
        }
        Ok(Self {
            fingerprint: meta.fingerprint,
            positive_label: meta.positive_label,
            columns: meta.columns,
            row_ids: meta.row_ids,
            values,
            factual_cells: meta.factual_cells,
            base_logit: meta.base_logit,
        })
    }

    /// CSV body and metadata JSON as strings.
    pub fn to_parts(&self) -> (String, String) {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        (String::from_utf8(buf).expect("utf-8"), self.metadata_json())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{m0_model, random_instance, random_model};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn inst(c: &[usize]) -> EncodedInstance {
        EncodedInstance(c.to_vec())
    }

    fn change(variable: usize, cell: usize) -> Change {
        Change { variable, cell }
    }

    /// Direct two-class posterior from the stored probabilities.
    fn posterior_oracle(m: &NBModel, x: &EncodedInstance) -> f64 {
        let joint = |k: usize| {
            let mut p = m.log_priors[k].exp();
            for (i, &q) in x.cells().iter().enumerate() {
                p *= m.cond_logp[i][q][k].exp().powf(m.weights[i]);
            }
            p
        };
        joint(m.positive_class) / (joint(0) + joint(1))
    }

    #[test]
    fn m0_deltas_toward_c2() {
        let m = m0_model(1);
        let x = inst(&[0, 0]);
        let oracle_logit = |y: &EncodedInstance| {
            let p = posterior_oracle(&m, y);
            (p / (1.0 - p)).ln()
        };
        let d_a = delta_univariate(&m, &x, 0, 1).unwrap();
        let d_b = delta_univariate(&m, &x, 1, 1).unwrap();
        assert_abs_diff_eq!(d_a, 16f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(d_a, oracle_logit(&inst(&[1, 0])) - oracle_logit(&x), epsilon = 1e-12);
        assert_abs_diff_eq!(d_b, oracle_logit(&inst(&[0, 1])) - oracle_logit(&x), epsilon = 1e-12);
        assert_abs_diff_eq!(d_b, 0.810930, epsilon = 1e-6);
        let both = ChangeSet::new(vec![change(0, 1), change(1, 1)]).unwrap();
        let d = delta_set(&m, &x, &both).unwrap();
        assert_abs_diff_eq!(d, 3.583519, epsilon = 1e-6);
        assert_abs_diff_eq!(d, d_a + d_b, epsilon = 1e-12);
        assert_eq!(delta_set(&m, &x, &ChangeSet::empty()).unwrap(), 0.0);
        assert_eq!(delta_univariate(&m, &x, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn duplicate_variable_rejected() {
        assert!(matches!(
            ChangeSet::new(vec![change(0, 1), change(0, 0)]),
            Err(DeltaError::DuplicateVariable(0))
        ));
        let json = r#"[{"variable":1,"cell":0},{"variable":1,"cell":1}]"#;
        assert!(serde_json::from_str::<ChangeSet>(json).is_err());
    }

    #[test]
    fn out_of_range_change_rejected() {
        let m = m0_model(0);
        assert!(matches!(
            delta_univariate(&m, &inst(&[0, 0]), 1, 5),
            Err(DeltaError::Preprocess(PreprocessError::CellOutOfRange { .. }))
        ));
    }

    #[test]
    fn m0_kb_row() {
        let m = m0_model(1);
        let kb = build_kb(&m, &[inst(&[0, 0])], &["r0".into()]).unwrap();
        assert_eq!(
            kb.columns.iter().map(KbColumn::header).collect::<Vec<_>>(),
            vec!["A:0", "A:1", "B:0", "B:1"]
        );
        let row = &kb.values[0];
        assert_eq!(row[0], 0.0);
        assert_abs_diff_eq!(row[1], 2.772589, epsilon = 1e-6);
        assert_eq!(row[2], 0.0);
        assert_abs_diff_eq!(row[3], 0.810930, epsilon = 1e-6);
        assert_abs_diff_eq!(kb.base_logit[0], -(0.8f64 / 0.2 * 0.6 / 0.4).ln(), epsilon = 1e-12);
    }

    #[test]
    fn empty_kb_keeps_header() {
        let kb = build_kb(&m0_model(0), &[], &[]).unwrap();
        assert!(kb.is_empty());
        assert_eq!(kb.columns.len(), 4);
        let (csv, _) = kb.to_parts();
        assert_eq!(csv.trim(), "id,A:0,A:1,B:0,B:1");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = build_kb(&m0_model(0), &[inst(&[0, 0]), inst(&[1, 1])], &["x".into(), "x".into()]);
        assert!(matches!(err, Err(DeltaError::DuplicateId(_))));
    }

    #[test]
    fn zero_weight_variables_are_not_columns() {
        let m = m0_model(0).with_weights(vec![0.0, 0.7]).unwrap();
        let kb = build_kb(&m, &[inst(&[1, 0])], &["a".into()]).unwrap();
        assert!(kb.columns.iter().all(|c| c.variable == 1));
        assert_eq!(kb.variables(), vec![1]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.csv");
        let m = random_model(&[3, 4, 2], 5);
        let xs: Vec<EncodedInstance> = (0..20).map(|s| random_instance(&m, s)).collect();
        let ids: Vec<String> = (0..20).map(|i| format!("id{i}")).collect();
        let kb = build_kb(&m, &xs, &ids).unwrap();
        kb.save(&path).unwrap();
        let back = DeltaTable::load(&path, Some(&m.fingerprint())).unwrap();
        assert_eq!(back, kb);
        for (a, b) in kb.values.iter().flatten().zip(back.values.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.to_parts(), kb.to_parts());
    }

    #[test]
    fn load_detects_corruption_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.csv");
        let m = m0_model(1);
        let kb = build_kb(&m, &[inst(&[0, 0])], &["r0".into()]).unwrap();
        kb.save(&path).unwrap();
        let other = m0_model(0).fingerprint();
        assert!(matches!(
            DeltaTable::load(&path, Some(&other)),
            Err(DeltaError::FingerprintMismatch { .. })
        ));
        assert!(DeltaTable::load(&path, None).is_ok());
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("A:0", "A:9", 1)).unwrap();
        assert!(matches!(DeltaTable::load(&path, None), Err(DeltaError::Format(_))));
    }

    #[test]
    fn probability_view_is_not_additive() {
        // unequal priors; M0's symmetry makes the two views agree by accident
        let base = m0_model(1);
        let m = NBModel::from_probabilities(
            base.schema.clone(),
            base.preprocessor.clone(),
            base.classes.clone(),
            [0.3, 0.7],
            vec![vec![[0.8, 0.2], [0.2, 0.8]], vec![[0.6, 0.4], [0.4, 0.6]]],
            vec![1.0, 1.0],
            1,
        )
        .unwrap();
        let kb = build_kb(&m, &[inst(&[0, 0])], &["r0".into()]).unwrap();
        let pd = kb.row(0).probability_deltas();
        let p0 = sigmoid(kb.base_logit[0]);
        let both = sigmoid(kb.base_logit[0] + kb.values[0][1] + kb.values[0][3]) - p0;
        assert!((pd[1] + pd[3] - both).abs() > 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn log_odds_identity_and_order_independence(
            cells in prop::collection::vec(2usize..5, 1..6),
            seed in any::<u64>(),
        ) {
            let m = random_model(&cells, seed);
            let x = random_instance(&m, seed ^ 1);
            let target = random_instance(&m, seed ^ 2);
            let changes: Vec<Change> = (0..m.num_variables())
                .filter(|i| (seed >> i) & 1 == 1)
                .map(|i| change(i, target.cells()[i]))
                .collect();
            let mut reversed = changes.clone();
            reversed.reverse();
            let cs = ChangeSet::new(changes).unwrap();
            let d = delta_set(&m, &x, &cs).unwrap();
            let x2 = cs.apply(&x);
            let lhs = m.score_logit(&x2).unwrap() - m.score_logit(&x).unwrap();
            prop_assert!((lhs - d).abs() < 1e-9);
            let d_rev = delta_set(&m, &x, &ChangeSet::new(reversed).unwrap()).unwrap();
            prop_assert!((d - d_rev).abs() < 1e-12);
            if d.abs() > 1e-9 {
                prop_assert_eq!(d > 0.0, posterior_oracle(&m, &x2) > posterior_oracle(&m, &x));
            }
        }

        #[test]
        fn kb_structure(cells in prop::collection::vec(2usize..5, 1..6), seed in any::<u64>()) {
            let m = random_model(&cells, seed);
            let xs: Vec<EncodedInstance> = (0..5).map(|s| random_instance(&m, seed.wrapping_add(s))).collect();
            let ids: Vec<String> = (0..5).map(|i| i.to_string()).collect();
            let kb = build_kb(&m, &xs, &ids).unwrap();
            let included = m.included_variables();
            let t: usize = included.iter().map(|&i| m.preprocessor.cell_count(i)).sum();
            for (r, row) in kb.values.iter().enumerate() {
                prop_assert_eq!(row.len(), t);
                let mut factual = 0;
                for (c, v) in kb.columns.iter().zip(row) {
                    if xs[r].cells()[c.variable] == c.cell {
                        prop_assert_eq!(v.to_bits(), 0f64.to_bits());
                        factual += 1;
                    }
                }
                prop_assert_eq!(factual, included.len());
            }
        }
    }
}
