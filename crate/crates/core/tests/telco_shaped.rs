//! Pipeline mechanics on a synthetic table with the Telco churn layout.
//!
//! The rows are generated here, not real customers; only the column set, the
//! row count and quirks such as blank `TotalCharges` follow the public file.

use std::io::Write;
use std::path::PathBuf;

use delta_recourse::data::{load_csv, Dataset, Schema};
use delta_recourse::explain::{
    greedy_counterfactual, negative_semifactual, render_trajectory, CfStatus, ConstraintSet,
};
use delta_recourse::pipeline::{kb_for_dataset, train, TrainConfig};
use delta_recourse::rng::SeededRng;

const ROWS: usize = 7043;

fn schema() -> Schema {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/telco/schema.json");
    Schema::from_json_file(path).unwrap()
}

fn pick<'a>(rng: &mut SeededRng, options: &[&'a str]) -> &'a str {
    options[rng.index(options.len())]
}

fn synthetic_csv(seed: u64) -> tempfile::NamedTempFile {
    let mut rng = SeededRng::new(seed);
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(
        f,
        "customerID,gender,SeniorCitizen,Partner,Dependents,tenure,PhoneService,MultipleLines,InternetService,\
         OnlineSecurity,OnlineBackup,DeviceProtection,TechSupport,StreamingTV,StreamingMovies,Contract,\
         PaperlessBilling,PaymentMethod,MonthlyCharges,TotalCharges,Churn"
    )
    .unwrap();
    for r in 0..ROWS {
        let tenure = if r % 640 == 0 { 0 } else { 1 + rng.index(72) };
        let internet = pick(&mut rng, &["DSL", "Fiber optic", "No"]);
        let contract = pick(&mut rng, &["Month-to-month", "One year", "Two year"]);
        let addon = |rng: &mut SeededRng| {
            if internet == "No" {
                "No internet service"
            } else {
                pick(rng, &["Yes", "No"])
            }
        };
        let security = addon(&mut rng);
        let backup = addon(&mut rng);
        let protection = addon(&mut rng);
        let support = addon(&mut rng);
        let tv = addon(&mut rng);
        let movies = addon(&mut rng);
        let phone = pick(&mut rng, &["Yes", "No"]);
        let lines = if phone == "No" { "No phone service" } else { pick(&mut rng, &["Yes", "No"]) };
        let payment = pick(
            &mut rng,
            &["Electronic check", "Mailed check", "Bank transfer (automatic)", "Credit card (automatic)"],
        );
        let monthly = 18.0 + rng.unit() * 100.0;
        let total = if tenure == 0 { " ".to_string() } else { format!("{:.2}", monthly * tenure as f64) };

        let mut z: f64 = -1.2;
        z += match contract {
            "Month-to-month" => 1.4,
            "One year" => -0.6,
            _ => -1.8,
        };
        z += if tenure < 12 { 0.9 } else if tenure > 48 { -0.9 } else { 0.0 };
        z += if internet == "Fiber optic" { 0.7 } else { 0.0 };
        z += if payment == "Electronic check" { 0.5 } else { 0.0 };
        z += if support == "No" { 0.4 } else { 0.0 };
        z += if security == "No" { 0.4 } else { 0.0 };
        let churn = rng.unit() < 1.0 / (1.0 + (-z).exp());

        writeln!(
            f,
            "{:04}-SYN,{},{},{},{},{tenure},{phone},{lines},{internet},{security},{backup},{protection},{support},\
             {tv},{movies},{contract},{},\"{payment}\",{monthly:.2},{total},{}",
            r,
            pick(&mut rng, &["Male", "Female"]),
            rng.index(2),
            pick(&mut rng, &["Yes", "No"]),
            pick(&mut rng, &["Yes", "No"]),
            pick(&mut rng, &["Yes", "No"]),
            if churn { "Yes" } else { "No" }
        )
        .unwrap();
    }
    f.flush().unwrap();
    f
}

fn load() -> Dataset {
    let f = synthetic_csv(3);
    load_csv(f.path(), &schema()).unwrap()
}

#[test]
fn full_pipeline_on_telco_layout() {
    let data = load();
    assert_eq!(data.len(), ROWS);
    assert_eq!(data.classes, vec!["Yes".to_string(), "No".to_string()]);

    let out = train(&data, &TrainConfig::default()).unwrap();
    assert_eq!(out.split.test.len(), 1409);
    assert!(out.report.test.auc.unwrap() > 0.75, "{:?}", out.report.test);
    let retained: Vec<&str> = out.report.retained.iter().map(|r| r.name.as_str()).collect();
    assert!(retained.contains(&"Contract"), "{retained:?}");
    assert!(!retained.contains(&"gender"), "{retained:?}");

    let test = data.subset(&out.split.test);
    let kb = kb_for_dataset(&out.model, &test).unwrap();
    assert_eq!(kb.len(), 1409);
    assert_eq!(kb.columns.len(), out.report.total_cells);

    let model = &out.model;
    let constraints = ConstraintSet::actionable_only(model);
    let mut counterfactual = None;
    let mut preventive = None;
    for row in kb.rows() {
        let p = model.predict_proba(row.factual).unwrap();
        if p <= 0.5 && counterfactual.is_none() {
            let r = greedy_counterfactual(model, &row, row.factual, &constraints, 0.5).unwrap();
            if r.status == CfStatus::CounterfactualFound && !r.steps.is_empty() {
                counterfactual = Some(r);
            }
        } else if p > 0.5 && preventive.is_none() {
            let r = negative_semifactual(model, &row, row.factual, &constraints, 3, 0.5).unwrap();
            if !r.steps.is_empty() {
                preventive = Some(r);
            }
        }
    }
    let cf = counterfactual.expect("a counterfactual trajectory");
    assert!(cf.steps.iter().all(|s| model.schema.variables[s.variable].actionable));
    let prev = preventive.expect("a negative semi-factual");
    let table = render_trajectory(&prev, model, None);
    let probs = table.probabilities();
    assert!(probs.windows(2).all(|w| w[1] < w[0]), "{probs:?}");
}

#[test]
fn blank_total_charges_get_their_own_cell() {
    let data = load();
    let out = train(&data, &TrainConfig::default()).unwrap();
    let pre = &out.model.preprocessor;
    let tc = pre.index_of("TotalCharges").unwrap();
    let blank = data.rows.iter().position(|r| r[tc].is_missing()).unwrap();
    let cell = pre.encode_row(&data.rows[blank]).unwrap().0[tc];
    let enc = &pre.variables[tc];
    assert_eq!(cell, enc.cell_count() - 1);
    assert_eq!(enc.label(cell), "(missing)");
}

#[test]
fn tenure_cells_use_interval_labels() {
    let data = load();
    let out = train(&data, &TrainConfig::default()).unwrap();
    let pre = &out.model.preprocessor;
    let t = pre.index_of("tenure").unwrap();
    let enc = &pre.variables[t];
    let labels: Vec<String> = (0..enc.cell_count()).map(|c| enc.label(c)).collect();
    assert!(labels[0].starts_with('['), "{labels:?}");
    assert!(labels[1..].iter().all(|l| l.starts_with(']')), "{labels:?}");
}
