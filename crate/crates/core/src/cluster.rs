//! k-means over knowledge-base rows, with elbow selection of k and
//! per-cluster Δ profiles.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Schema;
use crate::delta::DeltaTable;
use crate::nbmodel::logit;
use crate::rng::{derive_seed, SeededRng};

pub const DEFAULT_RESTARTS: usize = 8;
pub const DEFAULT_MAX_ITER: usize = 300;
/// Below this fraction of the k_min inertia the elbow is called weak.
pub const ELBOW_CONFIDENCE_FRACTION: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("InvalidK: k must be at least 1")]
    InvalidK,
    #[error("TooFewRows: k={k} needs at least {k} rows, got {rows}")]
    TooFewRows { k: usize, rows: usize },
    #[error("InvalidK: range {k_min}..={k_max} is empty or starts at zero")]
    InvalidRange { k_min: usize, k_max: usize },
    #[error("EmptyData: no rows or no columns to cluster")]
    EmptyData,
    #[error("LengthMismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("UnknownColumn: '{0}'")]
    UnknownColumn(String),
}

pub type Result<T, E = ClusterError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: DEFAULT_RESTARTS,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub seed: u64,
    pub iterations: usize,
    /// Inertia after every assignment pass, starting with the initial one.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (ties to the lower index) and squared distance per row.
fn assign(data: ArrayView2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    data.axis_iter(Axis(0))
        .map(|row| {
            let mut best = (0, f64::INFINITY);
            for (c, centroid) in centroids.axis_iter(Axis(0)).enumerate() {
                let d = sq_dist(row, centroid);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

fn kmeans_pp(data: ArrayView2<f64>, k: usize, rng: &mut SeededRng) -> Array2<f64> {
    let n = data.nrows();
    let mut centroids = Array2::zeros((k, data.ncols()));
    centroids.row_mut(0).assign(&data.row(rng.index(n)));
    let mut d2: Vec<f64> = data.axis_iter(Axis(0)).map(|r| sq_dist(r, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.unit() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.index(n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, r) in data.axis_iter(Axis(0)).enumerate() {
            d2[i] = d2[i].min(sq_dist(r, centroids.row(c)));
        }
    }
    centroids
}

/// Lloyd iterations from the given centroids. Empty clusters are re-seeded at
/// the point farthest from its own centroid.
fn lloyd(data: ArrayView2<f64>, mut centroids: Array2<f64>, max_iter: usize, seed: u64) -> KMeansResult {
    let k = centroids.nrows();
    let (mut assignments, mut dists) = assign(data, &centroids);
    let mut trace = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (row, &a) in data.axis_iter(Axis(0)).zip(&assignments) {
            let mut s = sums.row_mut(a);
            s += &row;
            counts[a] += 1;
        }
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 {
                let mean = &sums.row(c) / n as f64;
                centroids.row_mut(c).assign(&mean);
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..data.nrows())
                .map(|i| (i, sq_dist(data.row(i), centroids.row(assignments[i]))))
                .filter(|&(_, d)| d > 0.0)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((i, _)) = far {
                centroids.row_mut(c).assign(&data.row(i));
                counts[assignments[i]] -= 1;
                assignments[i] = c;
                counts[c] = 1;
            }
        }
        let (next, next_d) = assign(data, &centroids);
        trace.push(next_d.iter().sum());
        let stable = next == assignments;
        assignments = next;
        dists = next_d;
        if stable {
            break;
        }
    }
    KMeansResult {
        k,
        centroids: centroids.outer_iter().map(|r| r.to_vec()).collect(),
        assignments,
        inertia: dists.iter().sum(),
        seed,
        iterations,
        inertia_trace: trace,
    }
}

fn check_k(data: ArrayView2<f64>, k: usize) -> Result<()> {
    if data.nrows() == 0 || data.ncols() == 0 {
        return Err(ClusterError::EmptyData);
    }
    if k == 0 {
        return Err(ClusterError::InvalidK);
    }
    if k > data.nrows() {
        return Err(ClusterError::TooFewRows { k, rows: data.nrows() });
    }
    Ok(())
}

/// One k-means++ initialisation followed by Lloyd iterations.
pub fn fit_kmeans(data: ArrayView2<f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    check_k(data, k)?;
    let mut rng = SeededRng::new(seed);
    let init = kmeans_pp(data, k, &mut rng);
    Ok(lloyd(data, init, max_iter, seed))
}

/// Lowest-inertia fit over `config.restarts` seeded restarts; ties go to
/// the earlier restart.
pub fn fit_best(data: ArrayView2<f64>, k: usize, seed: u64, config: &KMeansConfig) -> Result<KMeansResult> {
    check_k(data, k)?;
    let fits: Vec<KMeansResult> = (0..config.restarts.max(1) as u64)
        .into_par_iter()
        .map(|r| fit_kmeans(data, k, derive_seed(seed, (k as u64) << 16 | r), config.max_iter))
        .collect::<Result<_>>()?;
    Ok(pick_best(fits))
}

fn pick_best(fits: Vec<KMeansResult>) -> KMeansResult {
    fits.into_iter()
        .reduce(|best, f| if f.inertia < best.inertia { f } else { best })
        .expect("at least one fit")
}

/// Adds the point farthest from `prev`'s centroids as a new centroid and
/// refines; the result can be no worse than `prev`.
fn grow(data: ArrayView2<f64>, prev: &KMeansResult, max_iter: usize) -> KMeansResult {
    let mut centroids = Array2::zeros((prev.k + 1, data.ncols()));
    for (c, row) in prev.centroids.iter().enumerate() {
        centroids.row_mut(c).assign(&ArrayView1::from(row.as_slice()));
    }
    let (_, d) = assign(data, &centroids.slice(ndarray::s![..prev.k, ..]).to_owned());
    let far = (0..d.len()).max_by(|&a, &b| d[a].total_cmp(&d[b]).then(b.cmp(&a))).unwrap_or(0);
    centroids.row_mut(prev.k).assign(&data.row(far));
    lloyd(data, centroids, max_iter, prev.seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElbowPoint {
    pub k: usize,
    pub inertia: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowResult {
    pub chosen_k: usize,
    pub curve: Vec<ElbowPoint>,
    /// Set when the curve has no clear bend.
    pub low_confidence: bool,
    pub best: KMeansResult,
}

/// Fit every k in `k_min..=k_max` and choose the k with the largest second
/// difference of the inertia curve.
///
/// Each k also tries a warm start from the (k−1) solution so the curve is
/// non-increasing. Ranges too short for a second difference pick the lowest
/// inertia (the smaller k on ties) and are flagged as low confidence.
pub fn elbow_select(
    data: ArrayView2<f64>,
    k_min: usize,
    k_max: usize,
    seed: u64,
    config: &KMeansConfig,
) -> Result<ElbowResult> {
    if k_min == 0 || k_min > k_max {
        return Err(ClusterError::InvalidRange { k_min, k_max });
    }
    check_k(data, k_max)?;
    let mut fits: Vec<KMeansResult> = Vec::new();
    for k in k_min..=k_max {
        let mut fit = fit_best(data, k, seed, config)?;
        if let Some(prev) = fits.last() {
            let warm = grow(data, prev, config.max_iter);
            if warm.inertia < fit.inertia {
                fit = warm;
            }
        }
        fits.push(fit);
    }
    let curve: Vec<ElbowPoint> = fits
        .iter()
        .map(|f| ElbowPoint {
            k: f.k,
            inertia: f.inertia,
        })
        .collect();

    let (chosen, low_confidence) = if fits.len() < 3 {
        let idx = (0..fits.len())
            .reduce(|a, b| if fits[b].inertia < fits[a].inertia { b } else { a })
            .unwrap_or(0);
        (idx, true)
    } else {
        let mut best = (1, f64::NEG_INFINITY);
        for i in 1..fits.len() - 1 {
            let sd = fits[i - 1].inertia - 2.0 * fits[i].inertia + fits[i + 1].inertia;
            if sd > best.1 {
                best = (i, sd);
            }
        }
        (best.0, best.1 < ELBOW_CONFIDENCE_FRACTION * fits[0].inertia)
    };
    let best = fits.swap_remove(chosen);
    Ok(ElbowResult {
        chosen_k: best.k,
        curve,
        low_confidence,
        best,
    })
}

/// Row-major matrix of the selected table columns.
pub fn kb_matrix(table: &DeltaTable, columns: &[usize]) -> Array2<f64> {
    let mut m = Array2::zeros((table.len(), columns.len()));
    for (i, row) in table.values.iter().enumerate() {
        for (j, &c) in columns.iter().enumerate() {
            m[[i, j]] = row[c];
        }
    }
    m
}

/// Table columns of variables the schema marks actionable.
pub fn actionable_columns(table: &DeltaTable, schema: &Schema) -> Vec<usize> {
    table
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| schema.variables.get(c.variable).is_some_and(|v| v.actionable))
        .map(|(i, _)| i)
        .collect()
}

/// Resolve `name:cell` headers to table column indices.
pub fn columns_by_header(table: &DeltaTable, headers: &[String]) -> Result<Vec<usize>> {
    headers
        .iter()
        .map(|h| {
            table
                .columns
                .iter()
                .position(|c| &c.header() == h)
                .ok_or_else(|| ClusterError::UnknownColumn(h.clone()))
        })
        .collect()
}

/// Compact label of a table column: 1-based variable position among the
/// table's variables, `I`, then the 1-based cell (e.g. `3I2`).
pub fn short_label(table: &DeltaTable, column: usize) -> String {
    let vars = table.variables();
    let c = &table.columns[column];
    let pos = vars.iter().position(|&v| v == c.variable).unwrap_or(0);
    format!("{}I{}", pos + 1, c.cell + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnLabel {
    pub header: String,
    pub short: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub cluster: usize,
    pub size: usize,
    pub size_fraction: f64,
    /// Share of members the model currently predicts positive.
    pub positive_fraction: f64,
    /// Mean Δ per table column.
    pub mean_delta: Vec<f64>,
}

/// Everything needed to inspect or export a clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub fingerprint: String,
    pub chosen_k: usize,
    pub low_confidence: bool,
    pub curve: Vec<ElbowPoint>,
    pub clustered_columns: Vec<String>,
    pub columns: Vec<ColumnLabel>,
    pub profiles: Vec<ClusterProfile>,
    pub assignments: Vec<usize>,
    pub row_ids: Vec<String>,
}

/// Per-cluster size, positive share (base logit above `logit(threshold)`)
/// and mean Δ over every table column.
pub fn profiles(table: &DeltaTable, assignments: &[usize], k: usize, threshold: f64) -> Result<Vec<ClusterProfile>> {
    if assignments.len() != table.len() {
        return Err(ClusterError::LengthMismatch {
            expected: table.len(),
            got: assignments.len(),
        });
    }
    let cut = logit(threshold);
    let dim = table.columns.len();
    let mut out: Vec<ClusterProfile> = (0..k)
        .map(|c| ClusterProfile {
            cluster: c,
            size: 0,
            size_fraction: 0.0,
            positive_fraction: 0.0,
            mean_delta: vec![0.0; dim],
        })
        .collect();
    let mut positives = vec![0usize; k];
    for ((row, &a), &z) in table.values.iter().zip(assignments).zip(&table.base_logit) {
        let p = &mut out[a];
        p.size += 1;
        for (m, v) in p.mean_delta.iter_mut().zip(row) {
            *m += v;
        }
        if z > cut {
            positives[a] += 1;
        }
    }
    let n = table.len() as f64;
    for (p, pos) in out.iter_mut().zip(positives) {
        if p.size > 0 {
            let s = p.size as f64;
            p.mean_delta.iter_mut().for_each(|m| *m /= s);
            p.positive_fraction = pos as f64 / s;
        }
        p.size_fraction = p.size as f64 / n;
    }
    Ok(out)
}

/// Elbow selection on `columns` followed by profiling.
pub fn cluster_table(
    table: &DeltaTable,
    columns: &[usize],
    k_min: usize,
    k_max: usize,
    seed: u64,
    config: &KMeansConfig,
    threshold: f64,
) -> Result<(ClusterReport, ElbowResult)> {
    let data = kb_matrix(table, columns);
    let elbow = elbow_select(data.view(), k_min, k_max, seed, config)?;
    let profiles = profiles(table, &elbow.best.assignments, elbow.chosen_k, threshold)?;
    let report = ClusterReport {
        fingerprint: table.fingerprint.clone(),
        chosen_k: elbow.chosen_k,
        low_confidence: elbow.low_confidence,
        curve: elbow.curve.clone(),
        clustered_columns: columns.iter().map(|&c| table.columns[c].header()).collect(),
        columns: (0..table.columns.len())
            .map(|c| ColumnLabel {
                header: table.columns[c].header(),
                short: short_label(table, c),
            })
            .collect(),
        profiles,
        assignments: elbow.best.assignments.clone(),
        row_ids: table.row_ids.clone(),
    };
    Ok((report, elbow))
}

impl ClusterReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per cluster: id, size fraction, positive fraction, then mean Δ
    /// per column under its short label.
    pub fn profiles_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["cluster".to_string(), "size_fraction".into(), "positive_fraction".into()];
        header.extend(self.columns.iter().map(|c| c.short.clone()));
        w.write_record(&header).expect("in-memory write");
        for p in &self.profiles {
            let mut rec = vec![p.cluster.to_string(), p.size_fraction.to_string(), p.positive_fraction.to_string()];
            rec.extend(p.mean_delta.iter().map(|v| v.to_string()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn elbow_csv(&self) -> String {
        let mut out = String::from("k,inertia\n");
        for p in &self.curve {
            out.push_str(&format!("{},{}\n", p.k, p.inertia));
        }
        out
    }

    pub fn assignments_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "cluster"]).expect("in-memory write");
        for (id, a) in self.row_ids.iter().zip(&self.assignments) {
            w.write_record([id.as_str(), &a.to_string()]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}
