//! Read-only HTTP API over a trained model, its knowledge base and optional
//! cluster profiles.
//!
//! All state is loaded once at startup and shared immutably between
//! handlers. Cells in requests are integer indices; labels are for display.

mod error;

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, Method};
use axum::routing::{get, post};
use axum::{Json, Router};
use delta_recourse::cluster::ClusterReport;
use delta_recourse::data::VariableKind;
use delta_recourse::delta::{build_kb, delta_univariate, Change, ChangeSet, DeltaError, DeltaTable, KbRow};
use delta_recourse::explain::{
    frontier_distance, greedy_counterfactual, negative_semifactual, CfResult, ConstraintSpec,
};
use delta_recourse::nbmodel::{NBModel, NbError};
use delta_recourse::preprocess::EncodedInstance;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use error::{ApiError, ErrorBody};

/// Preventive trajectories take this many steps unless the request says otherwise.
pub const DEFAULT_PREVENTIVE_STEPS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Model(#[from] NbError),
    #[error(transparent)]
    Kb(#[from] DeltaError),
    #[error("IoError: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("FormatError: cluster report: {0}")]
    Clusters(#[from] serde_json::Error),
    #[error("FingerprintMismatch: {what} was built from model {found}, serving model {expected}")]
    FingerprintMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
}

/// Artifacts served by the API.
#[derive(Debug)]
pub struct ServiceState {
    pub model: NBModel,
    pub kb: DeltaTable,
    pub clusters: Option<ClusterReport>,
    pub fingerprint: String,
    pub threshold: f64,
}

impl ServiceState {
    /// Check that the knowledge base and clusters belong to `model`.
    pub fn new(model: NBModel, kb: DeltaTable, clusters: Option<ClusterReport>, threshold: f64) -> Result<Self, ServiceError> {
        let fingerprint = model.fingerprint();
        let mismatch = |what, found: &str| ServiceError::FingerprintMismatch {
            what,
            expected: fingerprint.clone(),
            found: found.to_string(),
        };
        if kb.fingerprint != fingerprint {
            return Err(mismatch("knowledge base", &kb.fingerprint));
        }
        if let Some(c) = &clusters {
            if c.fingerprint != fingerprint {
                return Err(mismatch("cluster report", &c.fingerprint));
            }
        }
        Ok(Self {
            model,
            kb,
            clusters,
            fingerprint,
            threshold,
        })
    }

    pub fn load(model: &Path, kb: &Path, clusters: Option<&Path>, threshold: f64) -> Result<Self, ServiceError> {
        let model = NBModel::load(model)?;
        let kb = DeltaTable::load(kb, None)?;
        let clusters = clusters
            .map(|p| {
                let text = std::fs::read_to_string(p).map_err(|source| ServiceError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                Ok::<_, ServiceError>(serde_json::from_str(&text)?)
            })
            .transpose()?;
        Self::new(model, kb, clusters, threshold)
    }
}

type Shared = Arc<ServiceState>;
type ApiResult<T> = Result<Json<T>, ApiError>;

/// All endpoints, with CORS for `cors_origin` (any origin when `None`).
pub fn router(state: Shared, cors_origin: Option<&str>) -> Router {
    let origin = match cors_origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(o) => AllowOrigin::exact(o),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/schema", get(schema))
        .route("/predict", post(predict))
        .route("/whatif", post(whatif))
        .route("/counterfactual", post(counterfactual))
        .route("/kb/row/{id}", get(kb_row))
        .route("/kb/frontier", get(kb_frontier))
        .route("/clusters", get(clusters))
        .layer(cors)
        .with_state(state)
}

/// Serve until Ctrl-C.
pub async fn serve(state: ServiceState, addr: SocketAddr, cors_origin: Option<String>) -> std::io::Result<()> {
    let app = router(Arc::new(state), cors_origin.as_deref());
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Validate request cells with messages naming the offending field.
fn instance(model: &NBModel, cells: &[usize]) -> Result<EncodedInstance, ApiError> {
    let d = model.num_variables();
    if cells.len() != d {
        return Err(ApiError::bad_request(
            "LengthMismatch",
            format!("cells: expected {d} values, got {}", cells.len()),
        ));
    }
    for (i, &c) in cells.iter().enumerate() {
        let enc = &model.preprocessor.variables[i];
        if c >= enc.cell_count() {
            return Err(ApiError::bad_request(
                "CellOutOfRange",
                format!("cells[{i}] ({}): cell {c} out of range, {} cells", enc.name(), enc.cell_count()),
            ));
        }
    }
    Ok(EncodedInstance(cells.to_vec()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CellInfo {
    pub index: usize,
    pub label: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VariableInfo {
    pub index: usize,
    pub name: String,
    pub kind: VariableKind,
    pub actionable: bool,
    pub weight: f64,
    pub included: bool,
    pub cells: Vec<CellInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SchemaResponse {
    pub fingerprint: String,
    pub target: String,
    pub classes: [String; 2],
    pub positive_label: String,
    pub threshold: f64,
    pub variables: Vec<VariableInfo>,
    /// Names of the variables with non-zero weight.
    pub included: Vec<String>,
}

async fn schema(State(s): State<Shared>) -> Json<SchemaResponse> {
    let m = &s.model;
    let variables: Vec<VariableInfo> = m
        .preprocessor
        .variables
        .iter()
        .enumerate()
        .map(|(i, enc)| VariableInfo {
            index: i,
            name: enc.name().to_string(),
            kind: enc.kind(),
            actionable: m.schema.variables[i].actionable,
            weight: m.weights[i],
            included: m.weights[i] > 0.0,
            cells: (0..enc.cell_count())
                .map(|c| CellInfo {
                    index: c,
                    label: enc.label(c),
                })
                .collect(),
        })
        .collect();
    Json(SchemaResponse {
        fingerprint: s.fingerprint.clone(),
        target: m.schema.target.clone(),
        classes: m.classes.clone(),
        positive_label: m.positive_label().to_string(),
        threshold: s.threshold,
        included: variables.iter().filter(|v| v.included).map(|v| v.name.clone()).collect(),
        variables,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictRequest {
    pub cells: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictResponse {
    pub prob: f64,
    pub logit: f64,
    pub plausibility: f64,
}

async fn predict(State(s): State<Shared>, body: Result<Json<PredictRequest>, JsonRejection>) -> ApiResult<PredictResponse> {
    let Json(req) = body?;
    let x = instance(&s.model, &req.cells)?;
    Ok(Json(PredictResponse {
        prob: s.model.predict_proba(&x)?,
        logit: s.model.score_logit(&x)?,
        plausibility: s.model.plausibility(&x)?,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WhatIfRequest {
    pub cells: Vec<usize>,
    #[serde(default)]
    pub changes: Vec<Change>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChangeDelta {
    pub variable: usize,
    pub cell: usize,
    pub delta: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub delta: f64,
    pub prob_before: f64,
    pub prob_after: f64,
    pub logit_before: f64,
    pub logit_after: f64,
    pub plausibility_after: f64,
    pub cells_after: Vec<usize>,
    pub per_change: Vec<ChangeDelta>,
}

async fn whatif(State(s): State<Shared>, body: Result<Json<WhatIfRequest>, JsonRejection>) -> ApiResult<WhatIfResponse> {
    let Json(req) = body?;
    let m = &s.model;
    let x = instance(m, &req.cells)?;
    let changes = ChangeSet::new(req.changes)?;
    let per_change = changes
        .changes()
        .iter()
        .map(|c| {
            Ok(ChangeDelta {
                variable: c.variable,
                cell: c.cell,
                delta: delta_univariate(m, &x, c.variable, c.cell)?,
            })
        })
        .collect::<Result<Vec<_>, DeltaError>>()?;
    let after = changes.apply(&x);
    Ok(Json(WhatIfResponse {
        delta: per_change.iter().map(|c| c.delta).sum(),
        prob_before: m.predict_proba(&x)?,
        prob_after: m.predict_proba(&after)?,
        logit_before: m.score_logit(&x)?,
        logit_after: m.score_logit(&after)?,
        plausibility_after: m.plausibility(&after)?,
        cells_after: after.0,
        per_change,
    }))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfMode {
    #[default]
    Counterfactual,
    Preventive,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualRequest {
    pub row_id: Option<String>,
    pub cells: Option<Vec<usize>>,
    #[serde(default)]
    pub constraints: ConstraintSpec,
    pub threshold: Option<f64>,
    #[serde(default)]
    pub mode: CfMode,
    /// Preventive mode only.
    pub steps: Option<usize>,
}

async fn counterfactual(
    State(s): State<Shared>,
    body: Result<Json<CounterfactualRequest>, JsonRejection>,
) -> ApiResult<CfResult> {
    let Json(req) = body?;
    let m = &s.model;
    let threshold = req.threshold.unwrap_or(s.threshold);
    let constraints = req.constraints.resolve(m)?;
    let adhoc;
    let row: KbRow<'_> = match (&req.row_id, &req.cells) {
        (Some(id), None) => {
            let i = s
                .kb
                .row_index(id)
                .ok_or_else(|| ApiError::not_found("UnknownRowId", format!("no knowledge-base row '{id}'")))?;
            s.kb.row(i)
        }
        (None, Some(cells)) => {
            let x = instance(m, cells)?;
            adhoc = build_kb(m, &[x], &["(request)".to_string()])?;
            adhoc.row(0)
        }
        _ => {
            return Err(ApiError::bad_request(
                "InvalidRequest",
                "exactly one of row_id and cells is required",
            ))
        }
    };
    let result = match req.mode {
        CfMode::Counterfactual => greedy_counterfactual(m, &row, row.factual, &constraints, threshold)?,
        CfMode::Preventive => {
            let steps = req.steps.unwrap_or(DEFAULT_PREVENTIVE_STEPS);
            if steps == 0 {
                return Err(ApiError::bad_request("InvalidRequest", "steps must be at least 1"));
            }
            negative_semifactual(m, &row, row.factual, &constraints, steps, threshold)?
        }
    };
    Ok(Json(result))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ColumnInfo {
    pub header: String,
    pub variable: usize,
    pub name: String,
    pub cell: usize,
    pub label: String,
    pub factual: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KbRowResponse {
    pub id: String,
    pub positive_label: String,
    pub base_logit: f64,
    pub prob: f64,
    pub factual: Vec<usize>,
    pub columns: Vec<ColumnInfo>,
    /// Log-odds Δ per column; additive across variables.
    pub values: Vec<f64>,
    /// `σ(base + Δ) − σ(base)` per column; not additive.
    pub probability_deltas: Vec<f64>,
}

async fn kb_row(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<KbRowResponse> {
    let i = s
        .kb
        .row_index(&id)
        .ok_or_else(|| ApiError::not_found("UnknownRowId", format!("no knowledge-base row '{id}'")))?;
    let row = s.kb.row(i);
    let m = &s.model;
    Ok(Json(KbRowResponse {
        id: row.id.to_string(),
        positive_label: s.kb.positive_label.clone(),
        base_logit: row.base_logit,
        prob: m.predict_proba(row.factual)?,
        factual: row.factual.0.clone(),
        columns: row
            .columns
            .iter()
            .map(|c| ColumnInfo {
                header: c.header(),
                variable: c.variable,
                name: c.name.clone(),
                cell: c.cell,
                label: m.preprocessor.variables[c.variable].label(c.cell),
                factual: row.factual.0[c.variable] == c.cell,
            })
            .collect(),
        values: row.values.to_vec(),
        probability_deltas: row.probability_deltas(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FrontierQuery {
    pub max_steps: usize,
    pub threshold: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FrontierEntry {
    pub id: String,
    pub distance: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FrontierResponse {
    pub max_steps: usize,
    pub threshold: f64,
    pub ids: Vec<String>,
    pub rows: Vec<FrontierEntry>,
}

async fn kb_frontier(
    State(s): State<Shared>,
    query: Result<Query<FrontierQuery>, QueryRejection>,
) -> ApiResult<FrontierResponse> {
    let Query(q) = query?;
    let threshold = q.threshold.unwrap_or(s.threshold);
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(ApiError::bad_request(
            "InvalidThreshold",
            format!("{threshold} is outside (0, 1)"),
        ));
    }
    let rows: Vec<FrontierEntry> = s
        .kb
        .rows()
        .filter_map(|r| {
            frontier_distance(&r, threshold)
                .filter(|&d| d <= q.max_steps)
                .map(|distance| FrontierEntry {
                    id: r.id.to_string(),
                    distance,
                })
        })
        .collect();
    Ok(Json(FrontierResponse {
        max_steps: q.max_steps,
        threshold,
        ids: rows.iter().map(|r| r.id.clone()).collect(),
        rows,
    }))
}

async fn clusters(State(s): State<Shared>) -> ApiResult<ClusterReport> {
    s.clusters.clone().map(Json).ok_or_else(|| {
        ApiError::not_found(
            "NotFound",
            "no cluster profiles loaded; run `delta-recourse cluster` and restart the service with --clusters",
        )
    })
}
