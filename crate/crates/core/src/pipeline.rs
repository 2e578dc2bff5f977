//! End-to-end training: split, discretize, fit, select weights, evaluate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{split_indices, DataError, Dataset, SplitIndices};
use crate::delta::{build_kb, DeltaError, DeltaTable};
use crate::metrics::{accuracy, roc_auc};
use crate::nbmodel::{logit, NBModel, NbError, WeightMode};
use crate::preprocess::{PreprocessConfig, PreprocessError, Preprocessor};
use crate::rng::derive_seed;

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_SMOOTHING: f64 = 1.0;
/// Share of the training rows held out to choose weights.
pub const DEFAULT_SELECTION_FRACTION: f64 = 0.25;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Model(#[from] NbError),
    #[error(transparent)]
    Delta(#[from] DeltaError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratify: bool,
    pub smoothing: f64,
    pub preprocess: PreprocessConfig,
    pub weight_mode: WeightMode,
    pub selection_fraction: f64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train_fraction: DEFAULT_TRAIN_FRACTION,
            seed: DEFAULT_SEED,
            stratify: false,
            smoothing: DEFAULT_SMOOTHING,
            preprocess: PreprocessConfig::default(),
            weight_mode: WeightMode::Select,
            selection_fraction: DEFAULT_SELECTION_FRACTION,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedVariable {
    pub name: String,
    pub weight: f64,
    pub cells: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub rows: usize,
    pub auc: Option<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub fingerprint: String,
    pub positive_label: String,
    pub train_rows: usize,
    pub test_rows: usize,
    pub test: Evaluation,
    pub retained: Vec<RetainedVariable>,
    pub total_cells: usize,
    pub candidate_changes: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NBModel,
    pub split: SplitIndices,
    pub report: TrainReport,
}

/// Posterior-based AUC and thresholded accuracy of `model` on `dataset`.
pub fn evaluate(model: &NBModel, dataset: &Dataset, threshold: f64) -> Result<Evaluation> {
    let encoded = model.preprocessor.encode(dataset)?;
    let scores = encoded
        .iter()
        .map(|x| model.score_logit(x))
        .collect::<Result<Vec<_>, _>>()?;
    let actual: Vec<bool> = dataset
        .labels
        .iter()
        .map(|&l| dataset.classes[l] == model.positive_label())
        .collect();
    let cut = logit(threshold);
    let predicted: Vec<bool> = scores.iter().map(|&s| s > cut).collect();
    Ok(Evaluation {
        rows: dataset.len(),
        auc: if dataset.is_empty() { None } else { roc_auc(&scores, &actual) },
        accuracy: accuracy(&predicted, &actual),
    })
}

fn fit_weights(train: &Dataset, pre: &Preprocessor, config: &TrainConfig) -> Result<Vec<f64>> {
    match &config.weight_mode {
        WeightMode::Select => {
            let inner = split_indices(
                train.len(),
                1.0 - config.selection_fraction,
                derive_seed(config.seed, 1),
                config.stratify.then_some(train.labels.as_slice()),
            )?;
            let fit_part = train.subset(&inner.train);
            let held_out = train.subset(&inner.test);
            let model = NBModel::fit_dataset(&fit_part, pre.clone(), config.smoothing)?;
            let encoded = pre.encode(&held_out)?;
            let labels = relabel(&held_out, &model);
            Ok(model.select_weights(&encoded, &labels)?.weights)
        }
        WeightMode::Uniform => Ok(vec![1.0; pre.len()]),
        WeightMode::Fixed(w) => Ok(w.clone()),
    }
}

/// Labels of `dataset` as indices into `model.classes`.
fn relabel(dataset: &Dataset, model: &NBModel) -> Vec<usize> {
    dataset
        .labels
        .iter()
        .map(|&l| usize::from(dataset.classes[l] != model.classes[0]))
        .collect()
}

/// Split `dataset`, fit the preprocessor and model on the training part,
/// set weights per `config.weight_mode`, and evaluate on the test part.
///
/// In selection mode the weights are chosen on a held-out share of the
/// training rows; the probabilities are then refit on all training rows.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let split = split_indices(
        dataset.len(),
        config.train_fraction,
        config.seed,
        config.stratify.then_some(dataset.labels.as_slice()),
    )?;
    let train_set = dataset.subset(&split.train);
    let test_set = dataset.subset(&split.test);
    let pre = Preprocessor::fit(&train_set, &config.preprocess);
    let weights = fit_weights(&train_set, &pre, config)?;
    let model = NBModel::fit_dataset(&train_set, pre, config.smoothing)?.with_weights(weights)?;
    let test = evaluate(&model, &test_set, config.threshold)?;
    let report = report(&model, split.train.len(), split.test.len(), test);
    Ok(TrainOutcome { model, split, report })
}

/// Summary of a trained model and its held-out performance.
pub fn report(model: &NBModel, train_rows: usize, test_rows: usize, test: Evaluation) -> TrainReport {
    let retained: Vec<RetainedVariable> = model
        .included_variables()
        .into_iter()
        .map(|i| {
            let enc = &model.preprocessor.variables[i];
            RetainedVariable {
                name: enc.name().to_string(),
                weight: model.weights[i],
                cells: (0..enc.cell_count()).map(|c| enc.label(c)).collect(),
            }
        })
        .collect();
    let total_cells: usize = retained.iter().map(|r| r.cells.len()).sum();
    TrainReport {
        fingerprint: model.fingerprint(),
        positive_label: model.positive_label().to_string(),
        train_rows,
        test_rows,
        test,
        candidate_changes: total_cells - retained.len(),
        total_cells,
        retained,
    }
}

/// Encode `dataset` and build its knowledge base, keyed by the dataset ids.
pub fn kb_for_dataset(model: &NBModel, dataset: &Dataset) -> Result<DeltaTable> {
    let encoded = model.preprocessor.encode(dataset)?;
    Ok(build_kb(model, &encoded, &dataset.ids)?)
}
