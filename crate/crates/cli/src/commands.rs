//! Subcommand bodies. Each reads its inputs from a merged [`RunConfig`].

use std::fs;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use delta_recourse::cluster::{actionable_columns, cluster_table, columns_by_header, KMeansConfig};
use delta_recourse::data::{load_csv, record_from_json, Schema, SplitIndices};
use delta_recourse::delta::{build_kb, DeltaTable};
use delta_recourse::explain::{
    greedy_counterfactual, negative_semifactual, render_trajectory, CfResult, CfStatus, ConstraintSpec,
};
use delta_recourse::nbmodel::NBModel;
use delta_recourse::pipeline::{self, kb_for_dataset};
use delta_recourse_service::{ServiceState, DEFAULT_PREVENTIVE_STEPS};
use serde::{Deserialize, Serialize};

use crate::config::{ClusterColumns, ColumnSet, RunConfig, Slice, DEFAULT_PORT};
use crate::{CliError, Format};

const DEFAULT_HOST: &str = "127.0.0.1";

/// Train/test partition persisted next to the model so `kb` can rebuild it.
#[derive(Debug, Serialize, Deserialize)]
struct SplitFile {
    rows: usize,
    train_fraction: f64,
    seed: u64,
    stratify: bool,
    #[serde(flatten)]
    indices: SplitIndices,
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Missing(format!("--{flag} is required")).into())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_model(cfg: &RunConfig) -> Result<NBModel> {
    let path = cfg.model_path();
    NBModel::load(&path).with_context(|| format!("loading model {}", path.display()))
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let data_path = required(&cfg.data, "data")?;
    let schema_path = required(&cfg.schema, "schema")?;
    let mut schema = Schema::from_json_file(schema_path)?;
    if let Some(label) = &cfg.positive_label {
        schema.positive_label = label.clone();
    }
    let dataset = load_csv(data_path, &schema)?;
    let config = cfg.train_config();
    let outcome = pipeline::train(&dataset, &config)?;

    let out = cfg.output_dir();
    create_dir(&out)?;
    let model_path = out.join("model.json");
    outcome.model.save(&model_path)?;
    let split = SplitFile {
        rows: dataset.len(),
        train_fraction: config.train_fraction,
        seed: config.seed,
        stratify: config.stratify,
        indices: outcome.split,
    };
    write(&out.join("split.json"), serde_json::to_string_pretty(&split)?)?;
    write(&out.join("train_report.json"), serde_json::to_string_pretty(&outcome.report)?)?;

    let r = &outcome.report;
    println!("model      {}", model_path.display());
    println!("fingerprint {}", r.fingerprint);
    println!("rows       {} train / {} test", r.train_rows, r.test_rows);
    match r.test.auc {
        Some(auc) => println!("test AUC   {auc:.4}"),
        None => println!("test AUC   n/a (single class in test)"),
    }
    println!("accuracy   {:.4}", r.test.accuracy);
    println!(
        "retained   {} variables, {} cells, {} candidate changes",
        r.retained.len(),
        r.total_cells,
        r.candidate_changes
    );
    for v in &r.retained {
        println!("  {} (w={}) [{}]", v.name, v.weight, v.cells.join(" | "));
    }
    Ok(())
}

pub fn kb(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let data_path = required(&cfg.data, "data")?;
    let dataset = load_csv(data_path, &model.schema)?;
    let slice = cfg.slice.unwrap_or_default();
    let rows: Vec<usize> = match slice {
        Slice::All => (0..dataset.len()).collect(),
        Slice::Train | Slice::Test => {
            let path = cfg.split_path();
            let text = fs::read_to_string(&path).with_context(|| format!("reading split {}", path.display()))?;
            let split: SplitFile =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if split.rows != dataset.len() {
                return Err(CliError::SplitMismatch(format!(
                    "split was made for {} rows, data has {}",
                    split.rows,
                    dataset.len()
                ))
                .into());
            }
            let idx = if slice == Slice::Train { split.indices.train } else { split.indices.test };
            if let Some(&bad) = idx.iter().find(|&&i| i >= dataset.len()) {
                return Err(CliError::SplitMismatch(format!("row index {bad} is out of range")).into());
            }
            idx
        }
    };
    let table = kb_for_dataset(&model, &dataset.subset(&rows))?;
    let path = cfg.kb_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    table.save(&path)?;
    println!(
        "knowledge base {}: {} rows x {} columns",
        path.display(),
        table.len(),
        table.columns.len()
    );
    Ok(())
}

pub struct ExplainOptions {
    pub row_id: Option<String>,
    pub record: Option<String>,
    pub allow_non_actionable: bool,
    pub preventive: bool,
    pub steps: usize,
    pub format: Format,
}

fn read_record(arg: &str) -> Result<serde_json::Value> {
    let text = match arg.strip_prefix('@') {
        Some(path) => fs::read_to_string(path).with_context(|| format!("reading record {path}"))?,
        None => arg.to_string(),
    };
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("record: {e}")).into())
}

pub fn explain(cfg: &RunConfig, opts: &ExplainOptions) -> Result<()> {
    let model = load_model(cfg)?;
    let threshold = cfg.threshold();
    let table = match (&opts.row_id, &opts.record) {
        (Some(_), _) => DeltaTable::load(cfg.kb_path(), Some(&model.fingerprint()))?,
        (None, Some(record)) => {
            let raw = record_from_json(&model.schema, &read_record(record)?)?;
            let x = model.preprocessor.encode_row(&raw)?;
            build_kb(&model, &[x], &["record".to_string()])?
        }
        (None, None) => return Err(CliError::Missing("--row-id or --record is required".into()).into()),
    };
    let index = match &opts.row_id {
        Some(id) => table.row_index(id).ok_or_else(|| CliError::UnknownRowId(id.clone()))?,
        None => 0,
    };
    let row = table.row(index);

    let mut spec = match &cfg.constraints {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading constraints {}", path.display()))?;
            serde_json::from_str::<ConstraintSpec>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => ConstraintSpec::default(),
    };
    if !opts.allow_non_actionable {
        spec.freeze_non_actionable = true;
    }
    let constraints = spec.resolve(&model)?;
    let result = if opts.preventive {
        negative_semifactual(&model, &row, row.factual, &constraints, opts.steps, threshold)?
    } else {
        greedy_counterfactual(&model, &row, row.factual, &constraints, threshold)?
    };

    match opts.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&result)?),
        Format::Csv => print!("{}", render_trajectory(&result, &model, None).to_csv()),
        Format::Text => print!("{}", explain_text(&result, &model, &table.row_ids[index])),
    }
    Ok(())
}

fn status_name(status: CfStatus) -> &'static str {
    match status {
        CfStatus::CounterfactualFound => "counterfactual_found",
        CfStatus::SemiFactualOnly => "semi_factual_only",
        CfStatus::NoChangePossible => "no_change_possible",
    }
}

fn explain_text(result: &CfResult, model: &NBModel, id: &str) -> String {
    let mut out = format!(
        "individual {id}\nstatus     {} (threshold {})\nP({})     {:.6} -> {:.6} over {} step(s), total delta {:+.6}\n\
         plausibility {:.6e} -> {:.6e}\n",
        status_name(result.status),
        result.threshold,
        result.positive_label,
        result.initial_prob,
        result.final_prob,
        result.steps.len(),
        result.total_delta(),
        result.plausibility_initial,
        result.plausibility_final,
    );
    for (i, s) in result.steps.iter().enumerate() {
        let enc = &model.preprocessor.variables[s.variable];
        out.push_str(&format!(
            "  {}. {}: {} -> {}  delta {:+.6}  P {:.6}{}\n",
            i + 1,
            s.variable_name,
            enc.label(s.from_cell),
            enc.label(s.to_cell),
            s.delta,
            s.prob_after,
            if s.forced { "  (forced)" } else { "" }
        ));
    }
    out.push('\n');
    out.push_str(&render_trajectory(result, model, None).to_text());
    out
}

pub fn cluster(cfg: &RunConfig) -> Result<()> {
    let kb_path = cfg.kb_path();
    let model = match &cfg.model {
        Some(_) => Some(load_model(cfg)?),
        None => None,
    };
    let table = DeltaTable::load(&kb_path, model.as_ref().map(|m| m.fingerprint()).as_deref())?;
    let columns = match cfg.cluster_columns.clone().unwrap_or(ClusterColumns::Named(ColumnSet::Actionable)) {
        ClusterColumns::Named(ColumnSet::All) => (0..table.columns.len()).collect(),
        ClusterColumns::Named(ColumnSet::Actionable) => {
            let model = model.as_ref().ok_or_else(|| {
                CliError::Missing("--model is needed to select actionable columns (or pass --columns all)".into())
            })?;
            actionable_columns(&table, &model.schema)
        }
        ClusterColumns::Headers(h) => columns_by_header(&table, &h)?,
    };

    let (k_min, mut k_max) = cfg.k_range();
    if k_max > table.len() && k_min <= table.len() {
        eprintln!("note: k_max lowered from {k_max} to {} (row count)", table.len());
        k_max = table.len();
    }
    let config = KMeansConfig {
        restarts: cfg.restarts(),
        max_iter: cfg.max_iter(),
    };
    let seed = cfg.cluster_seed.or(cfg.seed).unwrap_or(pipeline::DEFAULT_SEED);
    let (report, _) = cluster_table(&table, &columns, k_min, k_max, seed, &config, cfg.threshold())?;

    let out = cfg.output_dir();
    create_dir(&out)?;
    write(&out.join("clusters.json"), report.to_json())?;
    write(&out.join("profiles.csv"), report.profiles_csv())?;
    write(&out.join("elbow.csv"), report.elbow_csv())?;
    write(&out.join("assignments.csv"), report.assignments_csv())?;

    println!(
        "chosen k   {}{}",
        report.chosen_k,
        if report.low_confidence { " (low confidence: no clear elbow)" } else { "" }
    );
    println!("columns    {} of {}", columns.len(), table.columns.len());
    for p in &report.curve {
        println!("  k={:<3} inertia {:.4}", p.k, p.inertia);
    }
    for p in &report.profiles {
        println!(
            "cluster {}: {} rows ({:.1}%), positive {:.1}%",
            p.cluster,
            p.size,
            100.0 * p.size_fraction,
            100.0 * p.positive_fraction
        );
    }
    println!("written to {}", out.display());
    Ok(())
}

fn socket_addr(host: &str, port: u16) -> Result<SocketAddr> {
    (host, port)
        .to_socket_addrs()
        .map_err(|e| CliError::Config(format!("address {host}:{port}: {e}")))?
        .next()
        .ok_or_else(|| CliError::Config(format!("address {host}:{port} did not resolve")).into())
}

pub fn serve(cfg: &RunConfig) -> Result<()> {
    let state = ServiceState::load(
        &cfg.model_path(),
        &cfg.kb_path(),
        cfg.clusters.as_deref(),
        cfg.threshold(),
    )?;
    let addr = socket_addr(cfg.host.as_deref().unwrap_or(DEFAULT_HOST), cfg.port.unwrap_or(DEFAULT_PORT))?;
    eprintln!(
        "serving {} rows on http://{addr} (preventive steps default {DEFAULT_PREVENTIVE_STEPS})",
        state.kb.len()
    );
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime
        .block_on(delta_recourse_service::serve(state, addr, cfg.cors_origin.clone()))
        .with_context(|| format!("serving on {addr}"))
}
