//! Weighted naive Bayes over discretized cells.
//!
//! For two classes the posterior of the positive class is a logistic function
//! of the weighted log-likelihood ratio summed over variables:
//!
//! ```text
//! logit(x) = log P(pos) - log P(neg) + Σ_i W_i (log P(x_i|pos) - log P(x_i|neg))
//! ```
//!
//! and the normalizing mixture `Σ_k P(C_k) Π_i P(x_i|C_k)^{W_i}` serves as a
//! plausibility score for an instance.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{Dataset, Schema};
use crate::metrics::roc_auc;
use crate::preprocess::{EncodedInstance, PreprocessError, Preprocessor};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Minimum AUC gain for forward selection to activate another variable.
pub const SELECTION_MIN_GAIN: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum NbError {
    #[error("EmptyDataset: at least one training row is required")]
    EmptyDataset,
    #[error("SingleClass: both classes must be present in the training data")]
    SingleClass,
    #[error("InvalidSmoothing: smoothing must be > 0, got {0}")]
    InvalidSmoothing(f64),
    #[error("LengthMismatch: {0}")]
    LengthMismatch(String),
    #[error("InvalidWeights: {0}")]
    InvalidWeights(String),
    #[error("InvalidModel: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("IoError: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("FormatError: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = NbError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBModel {
    pub format_version: u32,
    pub schema: Schema,
    pub preprocessor: Preprocessor,
    pub classes: [String; 2],
    /// `log P(C_k)`.
    pub log_priors: [f64; 2],
    /// `log P(X_i ∈ cell q | C_k)` indexed `[variable][cell][class]`.
    pub cond_logp: Vec<Vec<[f64; 2]>>,
    pub weights: Vec<f64>,
    pub positive_class: usize,
}

/// How variable weights are set after fitting the probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "weights")]
pub enum WeightMode {
    /// Greedy forward selection on validation AUC (binary weights).
    Select,
    /// All weights 1.
    Uniform,
    /// User-supplied weights in `[0, 1]`, one per variable.
    Fixed(Vec<f64>),
}

impl NBModel {
    /// Laplace-smoothed class priors and conditionals; all weights start at 1.
    ///
    /// `labels[r]` indexes `classes`; the positive class is `classes[0]`.
    pub fn fit(
        schema: Schema,
        preprocessor: Preprocessor,
        classes: [String; 2],
        encoded: &[EncodedInstance],
        labels: &[usize],
        smoothing: f64,
    ) -> Result<Self> {
        if !(smoothing > 0.0 && smoothing.is_finite()) {
            return Err(NbError::InvalidSmoothing(smoothing));
        }
        if encoded.len() != labels.len() {
            return Err(NbError::LengthMismatch(format!(
                "{} instances, {} labels",
                encoded.len(),
                labels.len()
            )));
        }
        if encoded.is_empty() {
            return Err(NbError::EmptyDataset);
        }
        preprocessor.check_schema(&schema)?;
        let d = preprocessor.len();
        let mut class_counts = [0usize; 2];
        let mut cell_counts: Vec<Vec<[usize; 2]>> =
            (0..d).map(|i| vec![[0; 2]; preprocessor.cell_count(i)]).collect();
        for (x, &k) in encoded.iter().zip(labels) {
            if k > 1 {
                return Err(NbError::LengthMismatch(format!("label index {k} is not 0 or 1")));
            }
            preprocessor.validate_instance(x)?;
            class_counts[k] += 1;
            for (i, &q) in x.cells().iter().enumerate() {
                cell_counts[i][q][k] += 1;
            }
        }
        if class_counts.contains(&0) {
            return Err(NbError::SingleClass);
        }
        let n = encoded.len() as f64;
        let log_priors = class_counts.map(|c| ((c as f64 + smoothing) / (n + 2.0 * smoothing)).ln());
        let cond_logp = cell_counts
            .iter()
            .map(|cells| {
                let m = cells.len() as f64;
                cells
                    .iter()
                    .map(|c| {
                        [0, 1].map(|k| {
                            ((c[k] as f64 + smoothing) / (class_counts[k] as f64 + smoothing * m)).ln()
                        })
                    })
                    .collect()
            })
            .collect();
        let model = Self {
            format_version: MODEL_FORMAT_VERSION,
            schema,
            preprocessor,
            classes,
            log_priors,
            cond_logp,
            weights: vec![1.0; d],
            positive_class: 0,
        };
        model.validate()?;
        Ok(model)
    }

    /// Encode and fit in one go.
    pub fn fit_dataset(dataset: &Dataset, preprocessor: Preprocessor, smoothing: f64) -> Result<Self> {
        if dataset.classes.len() < 2 {
            return Err(if dataset.is_empty() { NbError::EmptyDataset } else { NbError::SingleClass });
        }
        let encoded = preprocessor.encode(dataset)?;
        Self::fit(
            dataset.schema.clone(),
            preprocessor,
            [dataset.classes[0].clone(), dataset.classes[1].clone()],
            &encoded,
            &dataset.labels,
            smoothing,
        )
    }

    /// Build a model from explicit probabilities (`priors[k]`, `cond[i][q][k]`).
    pub fn from_probabilities(
        schema: Schema,
        preprocessor: Preprocessor,
        classes: [String; 2],
        priors: [f64; 2],
        cond: Vec<Vec<[f64; 2]>>,
        weights: Vec<f64>,
        positive_class: usize,
    ) -> Result<Self> {
        let model = Self {
            format_version: MODEL_FORMAT_VERSION,
            schema,
            preprocessor,
            classes,
            log_priors: priors.map(f64::ln),
            cond_logp: cond.into_iter().map(|v| v.into_iter().map(|p| p.map(f64::ln)).collect()).collect(),
            weights,
            positive_class,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NbError::InvalidModel(m));
        if self.format_version != MODEL_FORMAT_VERSION {
            return bad(format!("unsupported format version {}", self.format_version));
        }
        self.preprocessor.check_schema(&self.schema)?;
        if self.positive_class > 1 {
            return bad(format!("positive class index {} out of range", self.positive_class));
        }
        if self.classes[0] == self.classes[1] {
            return bad("class labels must differ".into());
        }
        let prior_sum: f64 = self.log_priors.iter().map(|l| l.exp()).sum();
        if !self.log_priors.iter().all(|l| l.is_finite()) || (prior_sum - 1.0).abs() > 1e-12 {
            return bad(format!("class priors sum to {prior_sum}"));
        }
        let d = self.preprocessor.len();
        if self.cond_logp.len() != d || self.weights.len() != d {
            return bad("per-variable tables do not match the preprocessor".into());
        }
        for (i, cells) in self.cond_logp.iter().enumerate() {
            if cells.len() != self.preprocessor.cell_count(i) {
                return bad(format!("variable {i} has {} cells in the model", cells.len()));
            }
            for k in 0..2 {
                if !cells.iter().all(|c| c[k].is_finite()) {
                    return bad(format!("variable {i} has a non-finite log-probability"));
                }
                let s: f64 = cells.iter().map(|c| c[k].exp()).sum();
                if (s - 1.0).abs() > 1e-9 {
                    return bad(format!("variable {i}, class {k}: conditionals sum to {s}"));
                }
            }
        }
        check_weights(&self.weights, d)
    }

    pub fn num_variables(&self) -> usize {
        self.preprocessor.len()
    }

    pub fn negative_class(&self) -> usize {
        1 - self.positive_class
    }

    pub fn positive_label(&self) -> &str {
        &self.classes[self.positive_class]
    }

    /// Same model with another class of interest.
    pub fn with_positive_class(mut self, positive_class: usize) -> Result<Self> {
        if positive_class > 1 {
            return Err(NbError::InvalidModel(format!("class index {positive_class} out of range")));
        }
        self.positive_class = positive_class;
        Ok(self)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        check_weights(&weights, self.num_variables())?;
        self.weights = weights;
        Ok(self)
    }

    /// Variables with a non-zero weight.
    pub fn included_variables(&self) -> Vec<usize> {
        (0..self.num_variables()).filter(|&i| self.weights[i] > 0.0).collect()
    }

    /// `log P(x_i = cell | pos) - log P(x_i = cell | neg)`.
    pub fn log_ratio(&self, variable: usize, cell: usize) -> f64 {
        let c = &self.cond_logp[variable][cell];
        c[self.positive_class] - c[self.negative_class()]
    }

    pub fn check_instance(&self, x: &EncodedInstance) -> Result<(), PreprocessError> {
        self.preprocessor.validate_instance(x)
    }

    /// `log P(C_k) + Σ_i W_i log P(x_i | C_k)`.
    pub fn log_joint(&self, x: &EncodedInstance, class: usize) -> Result<f64, PreprocessError> {
        self.check_instance(x)?;
        Ok(self.log_joint_unchecked(x, class))
    }

    fn log_joint_unchecked(&self, x: &EncodedInstance, class: usize) -> f64 {
        self.log_priors[class]
            + x.cells()
                .iter()
                .enumerate()
                .map(|(i, &q)| self.weights[i] * self.cond_logp[i][q][class])
                .sum::<f64>()
    }

    /// Log-odds of the positive class.
    pub fn score_logit(&self, x: &EncodedInstance) -> Result<f64, PreprocessError> {
        self.check_instance(x)?;
        Ok(self.score_logit_unchecked(x))
    }

    pub(crate) fn score_logit_unchecked(&self, x: &EncodedInstance) -> f64 {
        let prior = self.log_priors[self.positive_class] - self.log_priors[self.negative_class()];
        prior
            + x.cells()
                .iter()
                .enumerate()
                .map(|(i, &q)| self.weights[i] * self.log_ratio(i, q))
                .sum::<f64>()
    }

    /// Posterior probability of the positive class.
    pub fn predict_proba(&self, x: &EncodedInstance) -> Result<f64, PreprocessError> {
        Ok(sigmoid(self.score_logit(x)?))
    }

    /// `P(X) = Σ_k P(C_k) Π_i P(x_i|C_k)^{W_i}`.
    pub fn plausibility(&self, x: &EncodedInstance) -> Result<f64, PreprocessError> {
        self.check_instance(x)?;
        Ok((0..2).map(|k| self.log_joint_unchecked(x, k).exp()).sum())
    }

    pub fn apply_weight_mode(
        self,
        mode: &WeightMode,
        validation: &[EncodedInstance],
        labels: &[usize],
    ) -> Result<Self> {
        match mode {
            WeightMode::Select => self.select_weights(validation, labels),
            WeightMode::Uniform => {
                let d = self.num_variables();
                self.with_weights(vec![1.0; d])
            }
            WeightMode::Fixed(w) => self.with_weights(w.clone()),
        }
    }

    /// Greedy forward selection of binary weights on validation AUC.
    ///
    /// Starts from all-zero weights and repeatedly activates the variable with
    /// the largest AUC gain (lowest index on ties) while the gain exceeds
    /// [`SELECTION_MIN_GAIN`]. `labels` index `classes`.
    pub fn select_weights(self, validation: &[EncodedInstance], labels: &[usize]) -> Result<Self> {
        if validation.is_empty() {
            return Err(NbError::EmptyDataset);
        }
        if validation.len() != labels.len() {
            return Err(NbError::LengthMismatch(format!(
                "{} instances, {} labels",
                validation.len(),
                labels.len()
            )));
        }
        for x in validation {
            self.check_instance(x)?;
        }
        let d = self.num_variables();
        let positive: Vec<bool> = labels.iter().map(|&l| l == self.positive_class).collect();
        let contributions: Vec<Vec<f64>> = (0..d)
            .map(|i| validation.iter().map(|x| self.log_ratio(i, x.cells()[i])).collect())
            .collect();
        let mut scores = vec![0.0; validation.len()];
        let mut active = vec![false; d];
        let mut current = roc_auc(&scores, &positive).unwrap_or(0.5);
        loop {
            let mut best: Option<(usize, f64)> = None;
            for i in (0..d).filter(|&i| !active[i]) {
                let trial: Vec<f64> = scores.iter().zip(&contributions[i]).map(|(s, c)| s + c).collect();
                let auc = roc_auc(&trial, &positive).unwrap_or(0.5);
                if best.is_none_or(|(_, b)| auc > b) {
                    best = Some((i, auc));
                }
            }
            match best {
                Some((i, auc)) if auc - current > SELECTION_MIN_GAIN => {
                    active[i] = true;
                    for (s, c) in scores.iter_mut().zip(&contributions[i]) {
                        *s += c;
                    }
                    current = auc;
                }
                _ => break,
            }
        }
        let weights = active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
        self.with_weights(weights)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: NBModel = serde_json::from_str(s)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| NbError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| NbError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

fn check_weights(weights: &[f64], d: usize) -> Result<()> {
    if weights.len() != d {
        return Err(NbError::InvalidWeights(format!("expected {d} weights, got {}", weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(NbError::InvalidWeights(format!("weight {w} outside [0, 1]")));
    }
    Ok(())
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`].
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
