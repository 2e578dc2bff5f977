//! Run configuration: one JSON document whose keys mirror the command-line
//! flags. Flags win over the file; unset values fall back to defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use delta_recourse::cluster::{DEFAULT_MAX_ITER, DEFAULT_RESTARTS};
use delta_recourse::nbmodel::WeightMode;
use delta_recourse::pipeline::{
    TrainConfig, DEFAULT_SEED, DEFAULT_SELECTION_FRACTION, DEFAULT_SMOOTHING, DEFAULT_TRAIN_FRACTION,
};
use delta_recourse::preprocess::PreprocessConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_K_MIN: usize = 2;
pub const DEFAULT_K_MAX: usize = 12;
pub const DEFAULT_PORT: u16 = 8080;

/// Which rows of the data file enter the knowledge base.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Slice {
    #[default]
    Test,
    Train,
    All,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub kb: Option<PathBuf>,
    pub clusters: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub constraints: Option<PathBuf>,

    pub train_fraction: Option<f64>,
    pub seed: Option<u64>,
    pub stratify: Option<bool>,
    pub smoothing: Option<f64>,
    pub max_bins: Option<usize>,
    pub min_support: Option<usize>,
    pub merge_tolerance: Option<f64>,
    pub selection_fraction: Option<f64>,
    pub weight_mode: Option<WeightMode>,
    pub positive_label: Option<String>,
    pub threshold: Option<f64>,
    pub slice: Option<Slice>,

    pub k_min: Option<usize>,
    pub k_max: Option<usize>,
    pub cluster_seed: Option<u64>,
    pub restarts: Option<usize>,
    pub max_iter: Option<usize>,
    /// `actionable`, `all`, or a list of `name:cell` headers.
    pub cluster_columns: Option<ClusterColumns>,

    pub host: Option<String>,
    pub port: Option<u16>,
    pub cors_origin: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClusterColumns {
    Named(ColumnSet),
    Headers(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnSet {
    Actionable,
    All,
}

impl std::str::FromStr for ClusterColumns {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "actionable" => ClusterColumns::Named(ColumnSet::Actionable),
            "all" => ClusterColumns::Named(ColumnSet::All),
            list => ClusterColumns::Headers(list.split(',').map(|h| h.trim().to_string()).collect()),
        })
    }
}

/// `select`, `uniform`, or `fixed:w1,w2,...`.
pub fn parse_weight_mode(s: &str) -> Result<WeightMode, String> {
    match s {
        "select" => Ok(WeightMode::Select),
        "uniform" => Ok(WeightMode::Uniform),
        other => {
            let list = other
                .strip_prefix("fixed:")
                .ok_or_else(|| format!("expected select, uniform or fixed:w1,w2,..., got '{other}'"))?;
            list.split(',')
                .map(|w| w.trim().parse::<f64>().map_err(|e| format!("weight '{w}': {e}")))
                .collect::<Result<Vec<_>, _>>()
                .map(WeightMode::Fixed)
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())).into())
    }

    /// Fill every unset field of `self` from `base`.
    pub fn or(mut self, base: RunConfig) -> RunConfig {
        macro_rules! fill {
            ($($f:ident),+ $(,)?) => { $( if self.$f.is_none() { self.$f = base.$f; } )+ };
        }
        fill!(
            data, schema, model, kb, clusters, split, output_dir, constraints, train_fraction, seed, stratify,
            smoothing, max_bins, min_support, merge_tolerance, selection_fraction, weight_mode, positive_label,
            threshold, slice, k_min, k_max, cluster_seed, restarts, max_iter, cluster_columns, host, port,
            cors_origin,
        );
        self
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.output_dir().join("model.json"))
    }

    pub fn kb_path(&self) -> PathBuf {
        self.kb.clone().unwrap_or_else(|| self.output_dir().join("kb.csv"))
    }

    /// Split file; by default next to the model.
    pub fn split_path(&self) -> PathBuf {
        self.split.clone().unwrap_or_else(|| {
            self.model_path()
                .parent()
                .map(|p| p.join("split.json"))
                .unwrap_or_else(|| PathBuf::from("split.json"))
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold.unwrap_or(0.5)
    }

    pub fn train_config(&self) -> TrainConfig {
        let pre = PreprocessConfig::default();
        TrainConfig {
            train_fraction: self.train_fraction.unwrap_or(DEFAULT_TRAIN_FRACTION),
            seed: self.seed.unwrap_or(DEFAULT_SEED),
            stratify: self.stratify.unwrap_or(false),
            smoothing: self.smoothing.unwrap_or(DEFAULT_SMOOTHING),
            preprocess: PreprocessConfig {
                max_bins: self.max_bins.unwrap_or(pre.max_bins),
                min_support: self.min_support.unwrap_or(pre.min_support),
                merge_tolerance: self.merge_tolerance.unwrap_or(pre.merge_tolerance),
            },
            weight_mode: self.weight_mode.clone().unwrap_or(WeightMode::Select),
            selection_fraction: self.selection_fraction.unwrap_or(DEFAULT_SELECTION_FRACTION),
            threshold: self.threshold(),
        }
    }

    pub fn k_range(&self) -> (usize, usize) {
        (self.k_min.unwrap_or(DEFAULT_K_MIN), self.k_max.unwrap_or(DEFAULT_K_MAX))
    }

    pub fn restarts(&self) -> usize {
        self.restarts.unwrap_or(DEFAULT_RESTARTS)
    }

    pub fn max_iter(&self) -> usize {
        self.max_iter.unwrap_or(DEFAULT_MAX_ITER)
    }

    /// Range checks on every numeric setting.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let open_unit = |v: Option<f64>| v.is_none_or(|v| v > 0.0 && v < 1.0);
        if !open_unit(self.train_fraction) {
            return bad(format!("train_fraction {:?} must be in (0, 1)", self.train_fraction));
        }
        if !open_unit(self.selection_fraction) {
            return bad(format!("selection_fraction {:?} must be in (0, 1)", self.selection_fraction));
        }
        if !open_unit(self.threshold) {
            return bad(format!("threshold {:?} must be in (0, 1)", self.threshold));
        }
        if self.smoothing.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return bad(format!("smoothing {:?} must be > 0", self.smoothing));
        }
        if self.max_bins.is_some_and(|b| b < 2) {
            return bad("max_bins must be at least 2".into());
        }
        if self.min_support == Some(0) {
            return bad("min_support must be at least 1".into());
        }
        if self.merge_tolerance.is_some_and(|t| !(0.0..=1.0).contains(&t)) {
            return bad("merge_tolerance must be in [0, 1]".into());
        }
        if let Some(WeightMode::Fixed(w)) = &self.weight_mode {
            if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad("fixed weights must lie in [0, 1]".into());
            }
        }
        let (k_min, k_max) = self.k_range();
        if k_min == 0 || k_min > k_max {
            return bad(format!("k range {k_min}..{k_max} must satisfy 1 <= k_min <= k_max"));
        }
        if self.restarts == Some(0) || self.max_iter == Some(0) {
            return bad("restarts and max_iter must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_mode_parsing() {
        assert_eq!(parse_weight_mode("select").unwrap(), WeightMode::Select);
        assert_eq!(parse_weight_mode("fixed:0.5,1").unwrap(), WeightMode::Fixed(vec![0.5, 1.0]));
        assert!(parse_weight_mode("fixed:x").is_err());
        assert!(parse_weight_mode("average").is_err());
    }

    #[test]
    fn flags_win_over_file() {
        let file: RunConfig = serde_json::from_str(r#"{"seed": 7, "threshold": 0.3, "k_max": 6}"#).unwrap();
        let flags = RunConfig {
            seed: Some(9),
            ..RunConfig::default()
        };
        let merged = flags.or(file);
        assert_eq!(merged.seed, Some(9));
        assert_eq!(merged.threshold, Some(0.3));
        assert_eq!(merged.k_range(), (2, 6));
    }

    #[test]
    fn ranges_are_checked() {
        let cfg = RunConfig {
            train_fraction: Some(1.2),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = RunConfig {
            k_min: Some(5),
            k_max: Some(3),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sead": 1}"#).is_err());
    }

    #[test]
    fn cluster_columns_forms() {
        let c: ClusterColumns = serde_json::from_str(r#""actionable""#).unwrap();
        assert_eq!(c, ClusterColumns::Named(ColumnSet::Actionable));
        let c: ClusterColumns = serde_json::from_str(r#"["A:1"]"#).unwrap();
        assert_eq!(c, ClusterColumns::Headers(vec!["A:1".into()]));
        assert_eq!("A:1,B:0".parse::<ClusterColumns>().unwrap(), ClusterColumns::Headers(vec!["A:1".into(), "B:0".into()]));
    }
}
