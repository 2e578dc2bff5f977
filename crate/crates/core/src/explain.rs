//! Explanations read off a knowledge-base row.
//!
//! Because Δ is additive across variables, the sparsest counterfactual takes
//! the best cell of each variable in decreasing order of Δ until the
//! posterior crosses the threshold. The same row also gives preventive moves
//! (most negative Δ first) and the distance to the decision frontier.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::VariableKind;
use crate::delta::{Change, KbRow};
use crate::nbmodel::{logit, NBModel};
use crate::preprocess::{EncodedInstance, PreprocessError};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("FingerprintMismatch: row built from model {found}, explaining with {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("InstanceMismatch: instance does not match the factual cells of row '{0}'")]
    InstanceMismatch(String),
    #[error("InfeasibleConstraints: {0}")]
    InfeasibleConstraints(String),
    #[error("InvalidThreshold: {0} is outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("UnknownVariable: '{0}'")]
    UnknownVariable(String),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

pub type Result<T, E = ExplainError> = std::result::Result<T, E>;

/// A variable given by schema index or by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VariableRef {
    Index(usize),
    Name(String),
}

impl VariableRef {
    pub fn resolve(&self, model: &NBModel) -> Result<usize> {
        match self {
            VariableRef::Index(i) if *i < model.num_variables() => Ok(*i),
            VariableRef::Index(i) => Err(ExplainError::UnknownVariable(i.to_string())),
            VariableRef::Name(n) => model
                .preprocessor
                .index_of(n)
                .ok_or_else(|| ExplainError::UnknownVariable(n.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRef {
    pub variable: VariableRef,
    pub cell: usize,
}

/// Constraint document as supplied by users (JSON); variables by index or name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintSpec {
    pub frozen: Vec<VariableRef>,
    pub adjacency_only: Vec<VariableRef>,
    pub forced: Vec<CellRef>,
    pub forbidden: Vec<CellRef>,
    pub max_changes: Option<usize>,
    /// Also freeze every variable the schema marks as not actionable.
    pub freeze_non_actionable: bool,
}

impl ConstraintSpec {
    pub fn resolve(&self, model: &NBModel) -> Result<ConstraintSet> {
        let cell = |c: &CellRef| -> Result<Change> {
            let variable = c.variable.resolve(model)?;
            let cells = model.preprocessor.cell_count(variable);
            if c.cell >= cells {
                return Err(PreprocessError::CellOutOfRange {
                    variable,
                    cell: c.cell,
                    cells,
                }
                .into());
            }
            Ok(Change { variable, cell: c.cell })
        };
        let mut frozen = self
            .frozen
            .iter()
            .map(|v| v.resolve(model))
            .collect::<Result<BTreeSet<_>>>()?;
        if self.freeze_non_actionable {
            frozen.extend(non_actionable(model));
        }
        Ok(ConstraintSet {
            frozen,
            adjacency_only: self
                .adjacency_only
                .iter()
                .map(|v| v.resolve(model))
                .collect::<Result<_>>()?,
            forced: self.forced.iter().map(cell).collect::<Result<_>>()?,
            forbidden: self
                .forbidden
                .iter()
                .map(|c| cell(c).map(|c| (c.variable, c.cell)))
                .collect::<Result<_>>()?,
            max_changes: self.max_changes,
        })
    }
}

fn non_actionable(model: &NBModel) -> impl Iterator<Item = usize> + '_ {
    model
        .schema
        .variables
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.actionable)
        .map(|(i, _)| i)
}

/// Business constraints over variable indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConstraintSet {
    pub frozen: BTreeSet<usize>,
    /// Numeric variables that may only move to a neighbouring interval.
    pub adjacency_only: BTreeSet<usize>,
    /// Applied first, in order.
    pub forced: Vec<Change>,
    pub forbidden: BTreeSet<(usize, usize)>,
    pub max_changes: Option<usize>,
}

/// Why a single-cell move is not allowed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    Frozen,
    Forbidden,
    NotAdjacent,
    Factual,
}

impl ConstraintSet {
    pub fn none() -> Self {
        Self::default()
    }

    /// Freeze the variables the schema marks as not actionable.
    pub fn actionable_only(model: &NBModel) -> Self {
        Self {
            frozen: non_actionable(model).collect(),
            ..Self::default()
        }
    }

    /// Check a move of `variable` from `from` to `to`.
    pub fn check(&self, model: &NBModel, variable: usize, from: usize, to: usize) -> Result<(), Violation> {
        if from == to {
            return Err(Violation::Factual);
        }
        if self.frozen.contains(&variable) {
            return Err(Violation::Frozen);
        }
        if self.forbidden.contains(&(variable, to)) {
            return Err(Violation::Forbidden);
        }
        let enc = &model.preprocessor.variables[variable];
        if self.adjacency_only.contains(&variable)
            && enc.kind() == VariableKind::Numeric
            && !enc.adjacent(from, to)
        {
            return Err(Violation::NotAdjacent);
        }
        Ok(())
    }

    fn validate_forced(&self, model: &NBModel) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.forced {
            if c.variable >= model.num_variables() {
                return Err(ExplainError::UnknownVariable(c.variable.to_string()));
            }
            if !seen.insert(c.variable) {
                return Err(ExplainError::InfeasibleConstraints(format!(
                    "variable {} is forced more than once",
                    c.variable
                )));
            }
            if self.frozen.contains(&c.variable) {
                return Err(ExplainError::InfeasibleConstraints(format!(
                    "forced change on frozen variable '{}'",
                    model.preprocessor.variables[c.variable].name()
                )));
            }
            if self.forbidden.contains(&(c.variable, c.cell)) {
                return Err(ExplainError::InfeasibleConstraints(format!(
                    "forced cell {} of '{}' is forbidden",
                    c.cell,
                    model.preprocessor.variables[c.variable].name()
                )));
            }
        }
        if let Some(max) = self.max_changes {
            if self.forced.len() > max {
                return Err(ExplainError::InfeasibleConstraints(format!(
                    "{} forced changes exceed max_changes {max}",
                    self.forced.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfStatus {
    CounterfactualFound,
    SemiFactualOnly,
    NoChangePossible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub variable: usize,
    pub variable_name: String,
    pub from_cell: usize,
    pub to_cell: usize,
    pub delta: f64,
    /// Positive-class posterior of the cumulative instance.
    pub prob_after: f64,
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfResult {
    pub status: CfStatus,
    pub positive_label: String,
    pub threshold: f64,
    pub initial_instance: EncodedInstance,
    pub initial_prob: f64,
    pub steps: Vec<TrajectoryStep>,
    pub final_instance: EncodedInstance,
    pub final_prob: f64,
    pub plausibility_initial: f64,
    pub plausibility_final: f64,
}

impl CfResult {
    pub fn total_delta(&self) -> f64 {
        self.steps.iter().map(|s| s.delta).sum()
    }

    /// Steps taken before the posterior crossed the threshold: the positive
    /// semi-factual part of the trajectory.
    pub fn semi_factual_prefix(&self) -> &[TrajectoryStep] {
        let n = self
            .steps
            .iter()
            .position(|s| s.prob_after > self.threshold)
            .unwrap_or(self.steps.len());
        &self.steps[..n]
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(ExplainError::InvalidThreshold(threshold))
    }
}

fn check_row(model: &NBModel, row: &KbRow<'_>, x: &EncodedInstance) -> Result<()> {
    let expected = model.fingerprint();
    if row.fingerprint != expected {
        return Err(ExplainError::FingerprintMismatch {
            expected,
            found: row.fingerprint.to_string(),
        });
    }
    model.check_instance(x)?;
    if row.factual != x {
        return Err(ExplainError::InstanceMismatch(row.id.to_string()));
    }
    Ok(())
}

/// Running trajectory over one individual.
struct Walk<'m> {
    model: &'m NBModel,
    lookup: HashMap<(usize, usize), f64>,
    initial: EncodedInstance,
    current: EncodedInstance,
    changed: BTreeSet<usize>,
    steps: Vec<TrajectoryStep>,
}

impl<'m> Walk<'m> {
    fn new(model: &'m NBModel, row: &KbRow<'_>, x: &EncodedInstance) -> Self {
        let lookup = row
            .columns
            .iter()
            .zip(row.values)
            .map(|(c, &v)| ((c.variable, c.cell), v))
            .collect();
        Self {
            model,
            lookup,
            initial: x.clone(),
            current: x.clone(),
            changed: BTreeSet::new(),
            steps: Vec::new(),
        }
    }

    fn prob(&self) -> f64 {
        self.model.predict_proba(&self.current).expect("validated instance")
    }

    fn delta(&self, variable: usize, cell: usize) -> f64 {
        // variables outside the table carry zero weight
        self.lookup.get(&(variable, cell)).copied().unwrap_or(0.0)
    }

    fn apply(&mut self, variable: usize, cell: usize, forced: bool) {
        let from = self.current.0[variable];
        let delta = self.delta(variable, cell);
        self.current.0[variable] = cell;
        self.changed.insert(variable);
        let prob_after = self.prob();
        self.steps.push(TrajectoryStep {
            variable,
            variable_name: self.model.preprocessor.variables[variable].name().to_string(),
            from_cell: from,
            to_cell: cell,
            delta,
            prob_after,
            forced,
        });
    }

    fn apply_forced(&mut self, constraints: &ConstraintSet) {
        for c in &constraints.forced {
            if self.current.0[c.variable] != c.cell {
                self.apply(c.variable, c.cell, true);
            } else {
                self.changed.insert(c.variable);
            }
        }
    }

    fn budget_left(&self, constraints: &ConstraintSet) -> bool {
        constraints.max_changes.is_none_or(|m| self.steps.len() < m)
    }

    /// Admissible unchanged cell maximizing `sign * Δ` with `sign * Δ > 0`;
    /// ties go to the lower variable, then the lower cell.
    fn best_move(&self, constraints: &ConstraintSet, sign: f64) -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for (&(variable, cell), &delta) in &self.lookup {
            let score = sign * delta;
            if score <= 0.0 || self.changed.contains(&variable) {
                continue;
            }
            if constraints.check(self.model, variable, self.initial.0[variable], cell).is_err() {
                continue;
            }
            let better = match best {
                None => true,
                Some((bv, bc, bs)) => score > bs || (score == bs && (variable, cell) < (bv, bc)),
            };
            if better {
                best = Some((variable, cell, score));
            }
        }
        best.map(|(v, c, _)| (v, c))
    }

    fn finish(self, status: CfStatus, threshold: f64, initial_prob: f64) -> CfResult {
        let model = self.model;
        CfResult {
            status,
            positive_label: model.positive_label().to_string(),
            threshold,
            initial_prob,
            plausibility_initial: model.plausibility(&self.initial).expect("validated instance"),
            final_prob: self.prob(),
            plausibility_final: model.plausibility(&self.current).expect("validated instance"),
            initial_instance: self.initial,
            final_instance: self.current,
            steps: self.steps,
        }
    }
}

/// Sparse counterfactual toward the positive class.
///
/// Forced changes are applied first; then the admissible cell with the
/// largest positive Δ among untouched variables is applied until the
/// posterior exceeds `threshold`, no positive move remains, or
/// `max_changes` is reached.
pub fn greedy_counterfactual(
    model: &NBModel,
    row: &KbRow<'_>,
    x: &EncodedInstance,
    constraints: &ConstraintSet,
    threshold: f64,
) -> Result<CfResult> {
    check_threshold(threshold)?;
    check_row(model, row, x)?;
    constraints.validate_forced(model)?;
    let mut walk = Walk::new(model, row, x);
    let initial_prob = walk.prob();
    walk.apply_forced(constraints);
    while walk.prob() <= threshold && walk.budget_left(constraints) {
        match walk.best_move(constraints, 1.0) {
            Some((v, c)) => walk.apply(v, c, false),
            None => break,
        }
    }
    let status = if walk.prob() > threshold {
        CfStatus::CounterfactualFound
    } else if walk.steps.is_empty() {
        CfStatus::NoChangePossible
    } else {
        CfStatus::SemiFactualOnly
    };
    Ok(walk.finish(status, threshold, initial_prob))
}

/// Preventive trajectory: up to `steps` moves with the most negative Δ,
/// pushing the individual away from the positive class.
///
/// The status is `semi_factual_only` whenever a move was made and
/// `no_change_possible` otherwise; no class flip is sought.
pub fn negative_semifactual(
    model: &NBModel,
    row: &KbRow<'_>,
    x: &EncodedInstance,
    constraints: &ConstraintSet,
    steps: usize,
    threshold: f64,
) -> Result<CfResult> {
    check_threshold(threshold)?;
    check_row(model, row, x)?;
    constraints.validate_forced(model)?;
    let mut walk = Walk::new(model, row, x);
    let initial_prob = walk.prob();
    walk.apply_forced(constraints);
    let start = walk.steps.len();
    while walk.steps.len() - start < steps && walk.budget_left(constraints) {
        match walk.best_move(constraints, -1.0) {
            Some((v, c)) => walk.apply(v, c, false),
            None => break,
        }
    }
    let status = if walk.steps.is_empty() {
        CfStatus::NoChangePossible
    } else {
        CfStatus::SemiFactualOnly
    };
    Ok(walk.finish(status, threshold, initial_prob))
}

/// Fewest unconstrained single-variable changes that push the posterior
/// above `threshold`; `None` when even all positive moves fall short.
pub fn frontier_distance(row: &KbRow<'_>, threshold: f64) -> Option<usize> {
    let needed = logit(threshold) - row.base_logit;
    if needed < 0.0 {
        return Some(0);
    }
    let mut gains: Vec<f64> = row
        .best_per_variable()
        .into_iter()
        .map(|b| b.2)
        .filter(|&d| d > 0.0)
        .collect();
    gains.sort_by(|a, b| b.total_cmp(a));
    let mut total = 0.0;
    for (k, g) in gains.iter().enumerate() {
        total += g;
        if total > needed {
            return Some(k + 1);
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedCell {
    pub label: String,
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub cells: Vec<RenderedCell>,
    pub prob: f64,
}

/// Initial profile followed by one row per step; cells that differ from the
/// initial profile are marked as changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTable {
    pub headers: Vec<String>,
    pub rows: Vec<TrajectoryRow>,
}

pub const CHANGE_MARKER: &str = "*";

impl TrajectoryTable {
    fn cell_text(c: &RenderedCell) -> String {
        if c.changed {
            format!("{CHANGE_MARKER}{}", c.label)
        } else {
            c.label.clone()
        }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.prob).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).expect("in-memory write");
        for row in &self.rows {
            let mut rec: Vec<String> = row.cells.iter().map(Self::cell_text).collect();
            rec.push(format!("{}", row.prob));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Markdown-style table; changed cells carry a leading `*`.
    pub fn to_text(&self) -> String {
        let mut grid: Vec<Vec<String>> = vec![self.headers.clone()];
        for row in &self.rows {
            let mut line: Vec<String> = row.cells.iter().map(Self::cell_text).collect();
            line.push(format!("{:.6}", row.prob));
            grid.push(line);
        }
        let widths: Vec<usize> = (0..self.headers.len())
            .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0).max(3))
            .collect();
        let mut out = String::new();
        for (i, line) in grid.iter().enumerate() {
            out.push('|');
            for (cell, w) in line.iter().zip(&widths) {
                let _ = write!(out, " {cell:<w$} |");
            }
            out.push('\n');
            if i == 0 {
                out.push('|');
                for w in &widths {
                    let _ = write!(out, "{}|", "-".repeat(w + 2));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Render a trajectory over `variables` (default: every weighted variable).
pub fn render_trajectory(result: &CfResult, model: &NBModel, variables: Option<&[usize]>) -> TrajectoryTable {
    let shown: Vec<usize> = match variables {
        Some(v) => v.to_vec(),
        None => model.included_variables(),
    };
    let mut headers: Vec<String> = shown
        .iter()
        .map(|&i| model.preprocessor.variables[i].name().to_string())
        .collect();
    headers.push(format!("P({})", result.positive_label));
    let render = |x: &EncodedInstance, prob: f64| TrajectoryRow {
        cells: shown
            .iter()
            .map(|&i| RenderedCell {
                label: model.preprocessor.variables[i].label(x.0[i]),
                changed: x.0[i] != result.initial_instance.0[i],
            })
            .collect(),
        prob,
    };
    let mut rows = vec![render(&result.initial_instance, result.initial_prob)];
    let mut current = result.initial_instance.clone();
    for s in &result.steps {
        current.0[s.variable] = s.to_cell;
        rows.push(render(&current, s.prob_after));
    }
    TrajectoryTable { headers, rows }
}
