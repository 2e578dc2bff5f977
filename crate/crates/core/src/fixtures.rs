//! Small reference models and tables used by tests, demos and the service
//! smoke checks.

use rand_distr::{Distribution, Normal};

use crate::data::{Schema, VariableKind, VariableSpec};
use crate::delta::{DeltaTable, KbColumn};
use crate::nbmodel::NBModel;
use crate::preprocess::{EncodedInstance, GroupSpec, Preprocessor, VariableEncoder};
use crate::rng::SeededRng;

fn categorical_schema(names: &[String], target: &str, positive: &str, negative: &str) -> Schema {
    Schema {
        target: target.to_string(),
        positive_label: positive.to_string(),
        negative_label: Some(negative.to_string()),
        id_column: None,
        variables: names
            .iter()
            .map(|n| VariableSpec {
                name: n.clone(),
                kind: VariableKind::Categorical,
                actionable: true,
            })
            .collect(),
    }
}

/// Schema and preprocessor of the two-variable reference model: `A` with
/// cells `{a1}`, `{a2}` and `B` with cells `{b1}`, `{b2}`.
pub fn m0_schema_and_preprocessor() -> (Schema, Preprocessor) {
    let names = ["A".to_string(), "B".to_string()];
    let schema = categorical_schema(&names, "class", "C1", "C2");
    let pre = Preprocessor::new(
        [("A", "a"), ("B", "b")]
            .into_iter()
            .map(|(v, m)| {
                VariableEncoder::Categorical(GroupSpec {
                    variable: v.to_string(),
                    groups: vec![vec![format!("{m}1")], vec![format!("{m}2")]],
                    fallback_group: 0,
                })
            })
            .collect(),
    );
    (schema, pre)
}

/// Reference model: priors (0.5, 0.5), `P(a1|C1)=0.8`, `P(a1|C2)=0.2`,
/// `P(b1|C1)=0.6`, `P(b1|C2)=0.4`, unit weights. `positive_class` 0 is C1.
pub fn m0_model(positive_class: usize) -> NBModel {
    let (schema, pre) = m0_schema_and_preprocessor();
    NBModel::from_probabilities(
        schema,
        pre,
        ["C1".into(), "C2".into()],
        [0.5, 0.5],
        vec![vec![[0.8, 0.2], [0.2, 0.8]], vec![[0.6, 0.4], [0.4, 0.6]]],
        vec![1.0, 1.0],
        positive_class,
    )
    .expect("reference model is valid")
}

/// Random categorical model with `cells[i]` cells for variable `i`.
///
/// Conditionals are normalized uniform draws, priors lie in `[0.1, 0.9]`, and
/// weights are uniform in `[0, 1]` with roughly one in five forced to zero.
pub fn random_model(cells: &[usize], seed: u64) -> NBModel {
    let mut rng = SeededRng::new(seed);
    let names: Vec<String> = (0..cells.len()).map(|i| format!("v{i}")).collect();
    let schema = categorical_schema(&names, "y", "pos", "neg");
    let pre = Preprocessor::new(
        names
            .iter()
            .zip(cells)
            .map(|(n, &m)| {
                VariableEncoder::Categorical(GroupSpec {
                    variable: n.clone(),
                    groups: (0..m).map(|q| vec![format!("{n}c{q}")]).collect(),
                    fallback_group: 0,
                })
            })
            .collect(),
    );
    let p = 0.1 + 0.8 * rng.unit();
    let cond = cells
        .iter()
        .map(|&m| {
            let raw: Vec<[f64; 2]> = (0..m).map(|_| [0.05 + rng.unit(), 0.05 + rng.unit()]).collect();
            let s0: f64 = raw.iter().map(|r| r[0]).sum();
            let s1: f64 = raw.iter().map(|r| r[1]).sum();
            raw.iter().map(|r| [r[0] / s0, r[1] / s1]).collect()
        })
        .collect();
    let weights = cells
        .iter()
        .map(|_| if rng.unit() < 0.2 { 0.0 } else { rng.unit() })
        .collect();
    let positive = rng.index(2);
    NBModel::from_probabilities(schema, pre, ["pos".into(), "neg".into()], [p, 1.0 - p], cond, weights, positive)
        .expect("random model is valid")
}

/// Uniformly random valid instance for `model`.
pub fn random_instance(model: &NBModel, seed: u64) -> EncodedInstance {
    let mut rng = SeededRng::new(seed);
    EncodedInstance(
        (0..model.num_variables())
            .map(|i| rng.index(model.preprocessor.cell_count(i)))
            .collect(),
    )
}

/// Four well-separated clusters of Δ rows.
pub struct BlobFixture {
    pub table: DeltaTable,
    /// Generating blob of every row.
    pub blob_of_row: Vec<usize>,
    /// Blob centres over all table columns.
    pub centers: Vec<Vec<f64>>,
}

pub const BLOB_COUNT: usize = 4;
pub const BLOB_SEPARATION: f64 = 10.0;
pub const BLOB_NOISE: f64 = 0.3;

/// Four blobs in a knowledge-base shaped table.
///
/// The table has four variables with two cells each; every row's factual
/// cell is cell 0, so cell 1 of variable `b` carries the blob coordinate.
/// Blob `b` is centred at `BLOB_SEPARATION` on variable `b` and zero
/// elsewhere, so the centres are pairwise equidistant. Noise comes in
/// antithetic pairs so every blob mean equals its centre. Rows of blobs 0 and
/// 1 get a positive base logit, the others a negative one.
pub fn four_blob_table(seed: u64, rows_per_blob: usize) -> BlobFixture {
    assert!(rows_per_blob >= 2 && rows_per_blob.is_multiple_of(2), "rows_per_blob must be even");
    let mut rng = SeededRng::new(seed);
    let normal = Normal::new(0.0, BLOB_NOISE).expect("valid normal");
    let columns: Vec<KbColumn> = (0..BLOB_COUNT)
        .flat_map(|v| {
            (0..2).map(move |cell| KbColumn {
                variable: v,
                name: format!("x{v}"),
                cell,
            })
        })
        .collect();
    let dim = columns.len();
    let centers: Vec<Vec<f64>> = (0..BLOB_COUNT)
        .map(|b| {
            let mut c = vec![0.0; dim];
            c[2 * b + 1] = BLOB_SEPARATION;
            c
        })
        .collect();

    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (b, center) in centers.iter().enumerate() {
        for _ in 0..rows_per_blob / 2 {
            let noise: Vec<f64> = (0..BLOB_COUNT).map(|_| normal.sample(rng.inner_mut())).collect();
            for sign in [1.0, -1.0] {
                let mut row = center.clone();
                for (v, e) in noise.iter().enumerate() {
                    row[2 * v + 1] += sign * e;
                }
                rows.push((b, row));
            }
        }
    }
    rng.shuffle(&mut rows);

    let n = rows.len();
    let blob_of_row: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let table = DeltaTable {
        fingerprint: format!("synthetic-four-blob-{seed}"),
        positive_label: "pos".into(),
        columns,
        row_ids: (0..n).map(|i| format!("blob{}-{i}", blob_of_row[i])).collect(),
        values: rows.into_iter().map(|r| r.1).collect(),
        factual_cells: vec![EncodedInstance(vec![0; BLOB_COUNT]); n],
        base_logit: blob_of_row.iter().map(|&b| if b < 2 { 1.0 } else { -1.0 }).collect(),
    };
    BlobFixture {
        table,
        blob_of_row,
        centers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn m0_is_valid_and_flips_orientation() {
        let a = m0_model(0);
        let b = m0_model(1);
        let x = EncodedInstance(vec![0, 0]);
        let pa = a.predict_proba(&x).unwrap();
        let pb = b.predict_proba(&x).unwrap();
        assert!((pa + pb - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blob_means_equal_centres() {
        let f = four_blob_table(3, 50);
        for b in 0..BLOB_COUNT {
            let rows: Vec<&Vec<f64>> = f
                .table
                .values
                .iter()
                .zip(&f.blob_of_row)
                .filter(|(_, &bb)| bb == b)
                .map(|(r, _)| r)
                .collect();
            for c in 0..f.centers[b].len() {
                let mean = rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64;
                assert!((mean - f.centers[b][c]).abs() < 1e-9);
            }
        }
    }
}
