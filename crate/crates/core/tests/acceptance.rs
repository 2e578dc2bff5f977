//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.
//!
//! The churn criteria read the public Telco customer churn CSV from
//! `$TELCO_CSV`, falling back to `data/telco/WA_Fn-UseC_-Telco-Customer-Churn.csv`
//! at the workspace root.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use delta_recourse::cluster::{elbow_select, kb_matrix, KMeansConfig};
use delta_recourse::data::{load_csv, Schema};
use delta_recourse::delta::{build_kb, delta_set, delta_univariate, Change, ChangeSet, DeltaTable};
use delta_recourse::explain::{
    frontier_distance, greedy_counterfactual, negative_semifactual, CfStatus, ConstraintSet,
};
use delta_recourse::fixtures::{four_blob_table, m0_model, random_instance, random_model};
use delta_recourse::nbmodel::NBModel;
use delta_recourse::pipeline::{kb_for_dataset, train, TrainConfig};
use delta_recourse::preprocess::EncodedInstance;
use delta_recourse::rng::SeededRng;

type Outcome = Result<String, String>;

const FUZZ_CASES: usize = 10_000;
const MINIMALITY_MODELS: usize = 500;
const TELCO_ROWS: usize = 7043;
const TELCO_TEST_ROWS: usize = 1409;

// ---------------------------------------------------------------------------
// Oracles: direct evaluation of the weighted naive Bayes posterior from the
// model's probability tables, without going through the library's scoring.

fn joint(model: &NBModel, x: &[usize], class: usize) -> f64 {
    let mut p = model.log_priors[class].exp();
    for (i, &q) in x.iter().enumerate() {
        p *= model.cond_logp[i][q][class].exp().powf(model.weights[i]);
    }
    p
}

fn oracle_posterior(model: &NBModel, x: &[usize]) -> f64 {
    let pos = joint(model, x, model.positive_class);
    let neg = joint(model, x, 1 - model.positive_class);
    pos / (pos + neg)
}

fn oracle_logit(model: &NBModel, x: &[usize]) -> f64 {
    joint(model, x, model.positive_class).ln() - joint(model, x, 1 - model.positive_class).ln()
}

fn fuzz_corpus() -> Vec<(NBModel, EncodedInstance, ChangeSet)> {
    let mut rng = SeededRng::new(20_240_601);
    (0..FUZZ_CASES)
        .map(|case| {
            let vars = 1 + rng.index(6);
            let cells: Vec<usize> = (0..vars).map(|_| 2 + rng.index(4)).collect();
            let model = random_model(&cells, case as u64);
            let x = random_instance(&model, rng.next_u64());
            let mut changes = Vec::new();
            for (i, &m) in cells.iter().enumerate() {
                if rng.unit() < 0.5 {
                    changes.push(Change {
                        variable: i,
                        cell: rng.index(m),
                    });
                }
            }
            (model, x, ChangeSet::new(changes).expect("distinct variables"))
        })
        .collect()
}

fn log_odds_identity(corpus: &[(NBModel, EncodedInstance, ChangeSet)]) -> Outcome {
    let mut worst = 0.0f64;
    for (model, x, cs) in corpus {
        let d = delta_set(model, x, cs).map_err(|e| e.to_string())?;
        let x2 = cs.apply(x);
        let lib = model.score_logit(&x2).unwrap() - model.score_logit(x).unwrap();
        let direct = oracle_logit(model, &x2.0) - oracle_logit(model, &x.0);
        worst = worst.max((lib - d).abs()).max((direct - d).abs());
    }
    if worst < 1e-9 {
        Ok(format!("{} triples, max |error| {worst:.2e}", corpus.len()))
    } else {
        Err(format!("max |error| {worst:.2e} ≥ 1e-9"))
    }
}

fn additivity(corpus: &[(NBModel, EncodedInstance, ChangeSet)]) -> Outcome {
    let mut worst = 0.0f64;
    for (model, x, cs) in corpus {
        let combined = delta_set(model, x, cs).unwrap();
        let parts: f64 = cs
            .changes()
            .iter()
            .map(|c| delta_univariate(model, x, c.variable, c.cell).unwrap())
            .sum();
        // each univariate Δ also checked against the oracle's one-change logit gap
        for c in cs.changes() {
            let mut y = x.clone();
            y.0[c.variable] = c.cell;
            let u = delta_univariate(model, x, c.variable, c.cell).unwrap();
            worst = worst.max((oracle_logit(model, &y.0) - oracle_logit(model, &x.0) - u).abs());
        }
        worst = worst.max((combined - parts).abs());
    }
    if worst < 1e-9 {
        Ok(format!("{} change sets, max |error| {worst:.2e}", corpus.len()))
    } else {
        Err(format!("max |error| {worst:.2e} ≥ 1e-9"))
    }
}

fn sign_correspondence(corpus: &[(NBModel, EncodedInstance, ChangeSet)]) -> Outcome {
    let mut checked = 0;
    for (n, (model, x, cs)) in corpus.iter().enumerate() {
        let d = delta_set(model, x, cs).unwrap();
        if d.abs() <= 1e-9 {
            continue;
        }
        let x2 = cs.apply(x);
        let (p, p2) = (oracle_posterior(model, &x.0), oracle_posterior(model, &x2.0));
        let lib = (model.predict_proba(x).unwrap(), model.predict_proba(&x2).unwrap());
        let agrees = |a: f64, b: f64| (d > 0.0) == (b > a) && (b - a).abs() > 1e-12;
        if !agrees(p, p2) || !agrees(lib.0, lib.1) {
            return Err(format!("case {n}: Δ={d:e}, posterior {p} → {p2}"));
        }
        checked += 1;
    }
    Ok(format!("{checked} cases with |Δ| > 1e-9, all signs agree"))
}

/// Fewest changes that push the oracle posterior above `threshold`, by
/// enumerating every instance reachable from `x`.
fn brute_force_min_changes(model: &NBModel, x: &[usize], threshold: f64) -> Option<usize> {
    let cells: Vec<usize> = (0..x.len()).map(|i| model.preprocessor.cell_count(i)).collect();
    let total: usize = cells.iter().product();
    let mut best: Option<usize> = None;
    let mut y = vec![0; x.len()];
    for mut code in 0..total {
        for (i, &m) in cells.iter().enumerate() {
            y[i] = code % m;
            code /= m;
        }
        if oracle_posterior(model, &y) > threshold {
            let changes = y.iter().zip(x).filter(|(a, b)| a != b).count();
            best = Some(best.map_or(changes, |b| b.min(changes)));
        }
    }
    best
}

fn greedy_minimality() -> Outcome {
    let mut rng = SeededRng::new(77);
    let (mut found, mut none) = (0, 0);
    for m in 0..MINIMALITY_MODELS {
        let vars = 1 + rng.index(5);
        let cells: Vec<usize> = (0..vars).map(|_| 2 + rng.index(4)).collect();
        let model = random_model(&cells, 50_000 + m as u64);
        let x = random_instance(&model, rng.next_u64());
        let kb = build_kb(&model, std::slice::from_ref(&x), &["x".into()]).unwrap();
        let r = greedy_counterfactual(&model, &kb.row(0), &x, &ConstraintSet::none(), 0.5)
            .map_err(|e| e.to_string())?;
        let brute = brute_force_min_changes(&model, &x.0, 0.5);
        match (r.status, brute) {
            (CfStatus::CounterfactualFound, Some(k)) if r.steps.len() == k => found += 1,
            (CfStatus::SemiFactualOnly | CfStatus::NoChangePossible, None) => none += 1,
            (status, b) => {
                return Err(format!(
                    "model {m}: greedy {status:?} with {} steps, brute force {b:?}",
                    r.steps.len()
                ))
            }
        }
    }
    Ok(format!("{MINIMALITY_MODELS} models: {found} minimal counterfactuals, {none} agreed unreachable"))
}

fn check_kb_structure(model: &NBModel, kb: &DeltaTable) -> Result<(usize, usize), String> {
    let included = model.included_variables();
    let total_cells: usize = included.iter().map(|&i| model.preprocessor.cell_count(i)).sum();
    let d = included.len();
    if kb.columns.len() != total_cells {
        return Err(format!("{} columns, expected {total_cells}", kb.columns.len()));
    }
    for row in kb.rows() {
        if row.values.len() != total_cells {
            return Err(format!("row {} has {} values", row.id, row.values.len()));
        }
        let mut factual = 0;
        for (col, &v) in row.columns.iter().zip(row.values) {
            if row.factual.0[col.variable] == col.cell {
                factual += 1;
                if v.to_bits() != 0.0f64.to_bits() {
                    return Err(format!("row {}: factual cell {} holds {v}", row.id, col.header()));
                }
            }
        }
        if factual != d {
            return Err(format!("row {}: {} non-factual candidates", row.id, total_cells - factual));
        }
    }
    Ok((total_cells, total_cells - d))
}

fn kb_structure(telco: &Result<TelcoRun, String>) -> Outcome {
    let m0 = m0_model(1);
    let kb = build_kb(&m0, &[EncodedInstance(vec![0, 0]), EncodedInstance(vec![1, 0])], &["a".into(), "b".into()])
        .unwrap();
    let (t, c) = check_kb_structure(&m0, &kb)?;
    if (t, c) != (4, 2) {
        return Err(format!("M0 gives T={t}, candidates={c}; expected 4 and 2"));
    }
    let telco = telco.as_ref().map_err(|e| format!("M0 T=4/2 candidates ok; Telco: {e}"))?;
    let (tt, tc) = check_kb_structure(&telco.model, &telco.kb)?;
    Ok(format!("M0 T=4, 2 candidates; Telco T={tt}, {tc} candidates per row over {} rows", telco.kb.len()))
}

fn m0_golden() -> Outcome {
    // independent arithmetic straight from the reference probabilities
    let p_c1_a1b1 = (0.5 * 0.8 * 0.6) / (0.5 * 0.8 * 0.6 + 0.5 * 0.2 * 0.4);
    let delta_a = ((0.8f64 / 0.2) / (0.2 / 0.8)).ln();
    let delta_b = ((0.6f64 / 0.4) / (0.4 / 0.6)).ln();
    let p_c2_a2b1 = (0.5 * 0.8 * 0.4) / (0.5 * 0.8 * 0.4 + 0.5 * 0.2 * 0.6);
    let checks = [
        ("oracle P(C1|a1,b1) = 6/7", p_c1_a1b1, 6.0 / 7.0),
        ("oracle ln 16", delta_a, 16f64.ln()),
        ("oracle P(C2|a2,b1) = 8/11", p_c2_a2b1, 8.0 / 11.0),
    ];
    for (name, got, want) in checks {
        if (got - want).abs() > 1e-12 {
            return Err(format!("{name}: {got} vs {want}"));
        }
    }

    let c1 = m0_model(0);
    let c2 = m0_model(1);
    let x = EncodedInstance(vec![0, 0]);
    let kb = build_kb(&c2, std::slice::from_ref(&x), &["m0".into()]).unwrap();
    let cf = greedy_counterfactual(&c2, &kb.row(0), &x, &ConstraintSet::none(), 0.5).map_err(|e| e.to_string())?;
    let values = [
        ("P(C1|a1,b1)", c1.predict_proba(&x).unwrap(), p_c1_a1b1),
        ("Δ_C2(A→a2)", delta_univariate(&c2, &x, 0, 1).unwrap(), delta_a),
        ("Δ_C2(B→b2)", delta_univariate(&c2, &x, 1, 1).unwrap(), delta_b),
        ("KB A:a2", kb.values[0][1], delta_a),
        ("KB B:b2", kb.values[0][3], delta_b),
        ("counterfactual final prob", cf.final_prob, p_c2_a2b1),
    ];
    for (name, got, want) in values {
        if (got - want).abs() > 1e-9 {
            return Err(format!("{name}: {got} vs {want}"));
        }
    }
    if cf.status != CfStatus::CounterfactualFound || cf.steps.len() != 1 || cf.steps[0].variable != 0 {
        return Err(format!("counterfactual {:?} with {} steps", cf.status, cf.steps.len()));
    }
    Ok(format!(
        "6/7={:.6}, Δ_A={:.6}, Δ_B={:.6}, one-step counterfactual to {:.6}",
        p_c1_a1b1, delta_a, delta_b, cf.final_prob
    ))
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut models = vec![m0_model(0), m0_model(1)];
    models.extend((0..20).map(|s| random_model(&[2, 3, 4, 5, 3], 900 + s)));
    let mut kb_rows = 0;
    for (n, model) in models.iter().enumerate() {
        let json = model.to_json();
        let back = NBModel::from_json(&json).map_err(|e| e.to_string())?;
        if back.to_json() != json || back != *model {
            return Err(format!("model {n} JSON round trip differs"));
        }
        let path = dir.path().join(format!("m{n}.json"));
        model.save(&path).map_err(|e| e.to_string())?;
        let loaded = NBModel::load(&path).map_err(|e| e.to_string())?;
        if loaded.fingerprint() != model.fingerprint() {
            return Err(format!("model {n} fingerprint changed after save/load"));
        }

        let xs: Vec<EncodedInstance> = (0..25).map(|s| random_instance(model, s * 31 + n as u64)).collect();
        let ids: Vec<String> = (0..xs.len()).map(|i| format!("r{i}")).collect();
        let kb = build_kb(model, &xs, &ids).map_err(|e| e.to_string())?;
        let p1 = dir.path().join(format!("kb{n}.csv"));
        let p2 = dir.path().join(format!("kb{n}-again.csv"));
        kb.save(&p1).map_err(|e| e.to_string())?;
        let back = DeltaTable::load(&p1, Some(&model.fingerprint())).map_err(|e| e.to_string())?;
        back.save(&p2).map_err(|e| e.to_string())?;
        let same = |a: &PathBuf, b: &PathBuf| std::fs::read(a).ok() == std::fs::read(b).ok();
        if back != kb
            || !same(&p1, &p2)
            || !same(&DeltaTable::metadata_path(&p1), &DeltaTable::metadata_path(&p2))
        {
            return Err(format!("KB {n} round trip differs"));
        }
        kb_rows += kb.len();
    }
    Ok(format!("{} models and {kb_rows} KB rows re-serialize byte-identically", models.len()))
}

fn elbow_reproduction() -> Outcome {
    let mut chosen = Vec::new();
    for seed in 0..10u64 {
        let f = four_blob_table(1000 + seed, 50);
        let cols: Vec<usize> = (0..f.table.columns.len()).collect();
        let data = kb_matrix(&f.table, &cols);
        let r = elbow_select(data.view(), 2, 12, seed, &KMeansConfig::default()).map_err(|e| e.to_string())?;
        chosen.push(r.chosen_k);
    }
    if chosen.iter().all(|&k| k == 4) {
        Ok("chosen_k = 4 for 10/10 seeds over k in 2..=12".into())
    } else {
        Err(format!("chosen k per seed: {chosen:?}"))
    }
}

// ---------------------------------------------------------------------------
// Telco churn desk run

struct TelcoRun {
    model: NBModel,
    kb: DeltaTable,
    rows: usize,
    auc: f64,
    counterfactuals: usize,
    negative_semifactuals: usize,
    elapsed: Duration,
}

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn telco_csv() -> PathBuf {
    std::env::var_os("TELCO_CSV")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/telco/WA_Fn-UseC_-Telco-Customer-Churn.csv"))
}

fn run_telco() -> Result<TelcoRun, String> {
    let csv = telco_csv();
    if !csv.exists() {
        return Err(format!("dataset not found at {} (set TELCO_CSV)", csv.display()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    pool.install(|| {
        let start = Instant::now();
        let schema = Schema::from_json_file(workspace_root().join("data/telco/schema.json")).map_err(|e| e.to_string())?;
        let data = load_csv(&csv, &schema).map_err(|e| e.to_string())?;
        let out = train(&data, &TrainConfig::default()).map_err(|e| e.to_string())?;
        let test = data.subset(&out.split.test);
        let kb = kb_for_dataset(&out.model, &test).map_err(|e| e.to_string())?;
        let model = out.model;
        let constraints = ConstraintSet::actionable_only(&model);
        let (mut counterfactuals, mut negative_semifactuals) = (0, 0);
        for row in kb.rows() {
            let p = model.predict_proba(row.factual).map_err(|e| e.to_string())?;
            if p <= 0.5 {
                let r = greedy_counterfactual(&model, &row, row.factual, &constraints, 0.5).map_err(|e| e.to_string())?;
                if r.status == CfStatus::CounterfactualFound && !r.steps.is_empty() {
                    counterfactuals += 1;
                }
            } else {
                let r = negative_semifactual(&model, &row, row.factual, &constraints, 3, 0.5).map_err(|e| e.to_string())?;
                if !r.steps.is_empty() && r.final_prob < p {
                    negative_semifactuals += 1;
                }
            }
            let _ = frontier_distance(&row, 0.5);
        }
        Ok(TelcoRun {
            rows: data.len(),
            auc: out.report.test.auc.unwrap_or(0.0),
            model,
            kb,
            counterfactuals,
            negative_semifactuals,
            elapsed: start.elapsed(),
        })
    })
}

fn telco_end_to_end(run: &Result<TelcoRun, String>) -> Outcome {
    let r = run.as_ref().map_err(Clone::clone)?;
    let mut problems = Vec::new();
    if r.rows != TELCO_ROWS {
        problems.push(format!("{} rows loaded, expected {TELCO_ROWS}", r.rows));
    }
    if r.kb.len() != TELCO_TEST_ROWS {
        problems.push(format!("KB has {} rows, expected {TELCO_TEST_ROWS}", r.kb.len()));
    }
    if r.auc < 0.80 {
        problems.push(format!("test AUC {:.4} < 0.80", r.auc));
    }
    if r.counterfactuals == 0 {
        problems.push("no counterfactual trajectory".into());
    }
    if r.negative_semifactuals == 0 {
        problems.push("no negative semi-factual".into());
    }
    if r.elapsed > Duration::from_secs(120) {
        problems.push(format!("took {:.1}s", r.elapsed.as_secs_f64()));
    }
    if problems.is_empty() {
        Ok(format!(
            "{} rows, KB {} rows, AUC {:.4}, {} counterfactuals, {} negative semi-factuals, {} variables retained, {:.1}s",
            r.rows,
            r.kb.len(),
            r.auc,
            r.counterfactuals,
            r.negative_semifactuals,
            r.model.included_variables().len(),
            r.elapsed.as_secs_f64()
        ))
    } else {
        Err(problems.join("; "))
    }
}

// ---------------------------------------------------------------------------

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let out = f();
    let took = start.elapsed();
    let secs = took.as_secs_f64();
    match (out, limit) {
        (Ok(msg), Some(l)) if took > l => Err(format!("{msg}; took {secs:.2}s, limit {}s", l.as_secs())),
        (Ok(msg), _) => Ok(format!("{msg} [{secs:.2}s]")),
        (Err(e), _) => Err(format!("{e} [{secs:.2}s]")),
    }
}

fn main() {
    let corpus_start = Instant::now();
    let corpus = fuzz_corpus();
    let corpus_time = corpus_start.elapsed();
    let fuzz_limit = Duration::from_secs(10).saturating_sub(corpus_time);
    let telco = run_telco();

    let results: Vec<(&str, Outcome)> = vec![
        ("log_odds_identity", timed(Some(fuzz_limit), || log_odds_identity(&corpus))),
        ("additivity", timed(None, || additivity(&corpus))),
        ("sign_frontier_correspondence", timed(None, || sign_correspondence(&corpus))),
        ("greedy_minimality", timed(Some(Duration::from_secs(60)), greedy_minimality)),
        ("kb_structure", timed(None, || kb_structure(&telco))),
        ("telco_end_to_end", telco_end_to_end(&telco)),
        ("elbow_four_blobs", timed(None, elbow_reproduction)),
        ("m0_golden_values", timed(None, m0_golden)),
        ("persistence_round_trip", timed(None, persistence)),
    ];

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(msg) => println!("PASS {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
