//! Counterfactual explanations from a weighted naive Bayes classifier.
//!
//! A fitted [`NBModel`] gives, for every individual, the log-odds change Δ of
//! switching any single variable to any other cell. Those values form a
//! knowledge base ([`DeltaTable`]) from which sparse counterfactuals,
//! preventive moves, frontier distances and population clusters are read.

pub mod cluster;
pub mod data;
pub mod delta;
pub mod explain;
pub mod fixtures;
pub mod metrics;
pub mod nbmodel;
pub mod pipeline;
pub mod preprocess;
pub mod rng;

pub use data::{Dataset, RawValue, Schema, VariableKind, VariableSpec};
pub use delta::{build_kb, delta_set, delta_univariate, Change, ChangeSet, DeltaTable, KbRow};
pub use explain::{greedy_counterfactual, negative_semifactual, CfResult, CfStatus, ConstraintSet};
pub use nbmodel::{NBModel, WeightMode};
pub use preprocess::{EncodedInstance, PreprocessConfig, Preprocessor};
