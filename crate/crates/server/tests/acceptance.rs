//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero when any
//! criterion fails. Pass criterion numbers as arguments to run a subset.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use chrono::{DateTime, NaiveDate, Utc};
use common::Harness;
use farc_core::conversion::{named_to_bin, named_to_sample, sample_to_bin};
use farc_core::format::{parse_forecast, parse_project_config, parse_truth_csv, ProjectConfig};
use farc_core::model::{
    element_kinds_for, is_valid_element, ElementKind, Forecast, NamedDistribution, PredictionElement,
    TargetDefinition, TargetParts, TargetType, Value,
};
use farc_core::scoring::{applicable_scores, kernels, score_element, score_project, ScoreKind};
use farc_core::store::{ScoreQuery, Store};
use farc_core::validation::{check_forecast, validate_forecast, Rule};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value as Json};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "validity matrix", limit: Duration::from_secs(1), run: validity_matrix },
        Criterion { id: 2, name: "score dispatch", limit: Duration::from_secs(5), run: score_dispatch },
        Criterion { id: 3, name: "conversion consistency", limit: Duration::from_secs(30), run: conversion_consistency },
        Criterion { id: 4, name: "score kernels", limit: Duration::from_secs(60), run: score_kernels },
        Criterion { id: 5, name: "propriety and calibration", limit: Duration::from_secs(60), run: propriety_and_calibration },
        Criterion { id: 6, name: "end-to-end pipeline", limit: Duration::from_secs(30), run: end_to_end },
        Criterion { id: 7, name: "100k-row throughput", limit: Duration::from_secs(120), run: throughput },
        Criterion { id: 8, name: "issue dates and audit log", limit: Duration::from_secs(60), run: audit_trail },
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();

    let mut failed = 0;
    for c in criteria.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|note| {
            if elapsed <= c.limit {
                Ok(note)
            } else {
                Err(format!("over the time limit ({note})"))
            }
        });
        let timing = format!("{:.2}s/{}s", elapsed.as_secs_f64(), c.limit.as_secs());
        match outcome {
            Ok(note) => println!("criterion {} PASS {:<28} {:>11}  {note}", c.id, c.name, timing),
            Err(e) => {
                failed += 1;
                println!("criterion {} FAIL {:<28} {:>11}  {e}", c.id, c.name, timing);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Test-local transcriptions of the validity and score tables. These are
// written out independently of the library and are the oracles below.

const TYPES: [TargetType; 5] = [
    TargetType::Continuous,
    TargetType::Discrete,
    TargetType::Nominal,
    TargetType::Binary,
    TargetType::Date,
];

const KINDS: [ElementKind; 5] = [
    ElementKind::Point,
    ElementKind::Named,
    ElementKind::Bin,
    ElementKind::Sample,
    ElementKind::Quantile,
];

/// Element kinds each target type accepts.
fn valid_cell(t: TargetType, k: ElementKind) -> bool {
    use ElementKind::*;
    match t {
        TargetType::Continuous | TargetType::Discrete => true,
        TargetType::Nominal | TargetType::Binary => matches!(k, Point | Bin | Sample),
        TargetType::Date => k != Named,
    }
}

/// Populated score cells: (target type, element kind, score names).
const SCORE_TABLE: [(&str, &str, &[&str]); 19] = [
    ("continuous", "point", &["error", "abs_error", "crps"]),
    ("discrete", "point", &["error", "abs_error", "crps"]),
    ("binary", "point", &["error", "abs_error", "crps"]),
    ("date", "point", &["error", "abs_error", "crps"]),
    ("continuous", "named", &["log_score", "pit", "crps"]),
    ("discrete", "named", &["log_score", "pit", "crps"]),
    ("continuous", "bin", &["log_score", "pit", "crps", "brier"]),
    ("discrete", "bin", &["log_score", "pit", "crps", "brier"]),
    ("nominal", "bin", &["log_score", "brier"]),
    ("binary", "bin", &["log_score", "crps", "brier"]),
    ("date", "bin", &["log_score", "pit", "crps", "brier"]),
    ("continuous", "sample", &["log_score", "pit", "crps"]),
    ("discrete", "sample", &["log_score", "pit", "crps"]),
    ("nominal", "sample", &["log_score", "brier"]),
    ("binary", "sample", &["log_score", "crps", "brier"]),
    ("date", "sample", &["log_score", "pit", "crps"]),
    ("continuous", "quantile", &["interval_score"]),
    ("discrete", "quantile", &["interval_score"]),
    ("date", "quantile", &["interval_score"]),
];

fn expected_scores(t: TargetType, k: ElementKind) -> BTreeSet<&'static str> {
    SCORE_TABLE
        .iter()
        .filter(|(tt, kk, _)| *tt == t.as_str() && *kk == k.as_str())
        .flat_map(|(_, _, s)| s.iter().copied())
        .collect()
}

// ---------------------------------------------------------------------------
// Criterion 1

const MATRIX_PROJECT: &str = r#"{
  "name": "matrix",
  "units": [{"code": "u"}],
  "targets": [
    {"name": "continuous", "type": "continuous", "range": [0, 100], "cats": [0, 50]},
    {"name": "discrete", "type": "discrete", "cats": [0, 1, 2]},
    {"name": "nominal", "type": "nominal", "cats": ["a", "b"]},
    {"name": "binary", "type": "binary"},
    {"name": "date", "type": "date", "cats": ["2020-01-06", "2020-01-13"]}
  ],
  "timezeros": [{"date": "2020-01-06"}]
}"#;

fn example_value(t: TargetType) -> Json {
    match t {
        TargetType::Continuous => json!(1.5),
        TargetType::Discrete => json!(1),
        TargetType::Nominal => json!("a"),
        TargetType::Binary => json!(true),
        TargetType::Date => json!("2020-01-06"),
    }
}

fn minimal_payload(t: TargetType, k: ElementKind) -> Json {
    let v = example_value(t);
    match k {
        ElementKind::Point => json!({"value": v}),
        ElementKind::Named if t == TargetType::Discrete => json!({"family": "pois", "param1": 2.0}),
        ElementKind::Named => json!({"family": "norm", "param1": 0.0, "param2": 1.0}),
        ElementKind::Bin => {
            let cat = match t {
                TargetType::Continuous => json!([0, 50]),
                TargetType::Discrete => json!([0, 1]),
                TargetType::Nominal => json!(["a", "b"]),
                TargetType::Binary => json!([true, false]),
                TargetType::Date => json!(["2020-01-06", "2020-01-13"]),
            };
            json!({"cat": cat, "prob": [0.25, 0.75]})
        }
        ElementKind::Sample => json!({"sample": [v]}),
        ElementKind::Quantile => json!({"quantile": [0.25, 0.75], "value": [v, v]}),
    }
}

fn validity_matrix() -> Outcome {
    let config = parse_project_config(MATRIX_PROJECT.as_bytes()).map_err(|e| e.to_string())?;
    let (mut valid, mut invalid) = (0, 0);
    for t in TYPES {
        for k in KINDS {
            let expected = valid_cell(t, k);
            ensure!(
                is_valid_element(t, k) == expected && element_kinds_for(t).contains(&k) == expected,
                "library table disagrees at ({t:?}, {k:?})"
            );
            let doc = json!({"predictions": [
                {"unit": "u", "target": t.as_str(), "class": k.as_str(), "prediction": minimal_payload(t, k)}
            ]});
            let doc = parse_forecast(doc.to_string().as_bytes()).map_err(|e| format!("({t:?}, {k:?}): {e}"))?;
            let violations = validate_forecast(&doc, &config);
            if expected {
                ensure!(violations.is_empty(), "({t:?}, {k:?}) should be accepted: {violations:?}");
                ensure!(check_forecast(&doc, &config).is_ok(), "({t:?}, {k:?}) not storable");
                valid += 1;
            } else {
                ensure!(
                    violations.len() == 1 && violations[0].rule() == Some(Rule::Matrix),
                    "({t:?}, {k:?}) should give exactly one MATRIX-001: {violations:?}"
                );
                invalid += 1;
            }
        }
    }
    Ok(format!("{valid} valid and {invalid} invalid cells as expected"))
}

// ---------------------------------------------------------------------------
// Shared scenario: 3 units and one target of each type.

const SCENARIO_PROJECT: &str = r#"{
  "name": "scenario",
  "units": [{"code": "U1"}, {"code": "U2"}, {"code": "U3"}],
  "targets": [
    {"name": "cases", "type": "continuous", "range": [0, 1000], "cats": [0, 10, 20, 50, 100]},
    {"name": "peak week", "type": "discrete", "cats": [0, 1, 2, 3, 4, 5]},
    {"name": "severity", "type": "nominal", "cats": ["low", "mid", "high"]},
    {"name": "above baseline", "type": "binary"},
    {"name": "onset", "type": "date", "cats": ["2020-01-06", "2020-01-13", "2020-01-20"]}
  ],
  "timezeros": [
    {"date": "2020-01-06"}, {"date": "2020-01-13"}, {"date": "2020-01-20"},
    {"date": "2020-01-27"}, {"date": "2020-02-03"}
  ]
}"#;

const UNITS: [&str; 3] = ["U1", "U2", "U3"];
const TARGETS: [(&str, TargetType); 5] = [
    ("cases", TargetType::Continuous),
    ("peak week", TargetType::Discrete),
    ("severity", TargetType::Nominal),
    ("above baseline", TargetType::Binary),
    ("onset", TargetType::Date),
];
const TIMEZEROS: [&str; 5] = ["2020-01-06", "2020-01-13", "2020-01-20", "2020-01-27", "2020-02-03"];
const NOMINAL_CATS: [&str; 3] = ["low", "mid", "high"];
const DATE_CATS: [&str; 3] = ["2020-01-06", "2020-01-13", "2020-01-20"];
const LEVEL_SETS: [&[f64]; 3] = [&[0.5], &[0.1, 0.5, 0.9], &[0.025, 0.25, 0.5, 0.75, 0.975]];

fn day(offset: i64) -> String {
    let base = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    (base + chrono::Duration::days(offset)).to_string()
}

/// A random observation, as an ordering key and its wire form.
fn random_value(rng: &mut StdRng, t: TargetType) -> (f64, Json) {
    match t {
        TargetType::Continuous => {
            let x = (rng.gen_range(0.0..200.0f64) * 100.0).round() / 100.0;
            (x, json!(x))
        }
        TargetType::Discrete => {
            let x = rng.gen_range(0..=5i64);
            (x as f64, json!(x))
        }
        TargetType::Nominal => {
            let i = rng.gen_range(0..NOMINAL_CATS.len());
            (i as f64, json!(NOMINAL_CATS[i]))
        }
        TargetType::Binary => {
            let b = rng.gen_bool(0.5);
            (b as u8 as f64, json!(b))
        }
        TargetType::Date => {
            let d = rng.gen_range(0..30i64);
            (d as f64, json!(day(d)))
        }
    }
}

fn bin_cats(t: TargetType) -> Vec<Json> {
    match t {
        TargetType::Continuous => [0, 10, 20, 50, 100].iter().map(|c| json!(c)).collect(),
        TargetType::Discrete => (0..=5).map(|c| json!(c)).collect(),
        TargetType::Nominal => NOMINAL_CATS.iter().map(|c| json!(c)).collect(),
        TargetType::Binary => vec![json!(true), json!(false)],
        TargetType::Date => DATE_CATS.iter().map(|c| json!(c)).collect(),
    }
}

fn random_payload(rng: &mut StdRng, t: TargetType, k: ElementKind) -> Json {
    match k {
        ElementKind::Point => json!({"value": random_value(rng, t).1}),
        ElementKind::Named if t == TargetType::Discrete => {
            json!({"family": "pois", "param1": rng.gen_range(0.5..5.0)})
        }
        ElementKind::Named => json!({
            "family": "norm", "param1": rng.gen_range(0.0..200.0), "param2": rng.gen_range(1.0..50.0)
        }),
        ElementKind::Bin => {
            let cats = bin_cats(t);
            let weights: Vec<f64> = cats.iter().map(|_| rng.gen_range(0.01..1.0)).collect();
            let total: f64 = weights.iter().sum();
            let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
            json!({"cat": cats, "prob": probs})
        }
        ElementKind::Sample => {
            let n = rng.gen_range(1..=8);
            let values: Vec<Json> = (0..n).map(|_| random_value(rng, t).1).collect();
            json!({"sample": values})
        }
        ElementKind::Quantile => {
            let levels = LEVEL_SETS[rng.gen_range(0..LEVEL_SETS.len())];
            let mut values: Vec<(f64, Json)> = levels.iter().map(|_| random_value(rng, t)).collect();
            values.sort_by(|a, b| a.0.total_cmp(&b.0));
            let values: Vec<Json> = values.into_iter().map(|(_, v)| v).collect();
            json!({"quantile": levels, "value": values})
        }
    }
}

/// A valid random forecast over the scenario project.
fn random_forecast(rng: &mut StdRng) -> Json {
    let mut predictions = Vec::new();
    for unit in UNITS {
        for (target, t) in TARGETS {
            for k in KINDS.into_iter().filter(|&k| valid_cell(t, k)) {
                if rng.gen_bool(0.5) {
                    predictions.push(json!({
                        "unit": unit, "target": target, "class": k.as_str(),
                        "prediction": random_payload(rng, t, k)
                    }));
                }
            }
        }
    }
    json!({"predictions": predictions})
}

/// Truth CSV for the given time-zeros, each cell present with probability 0.85.
fn random_truth(rng: &mut StdRng, timezeros: &[&str]) -> String {
    let mut csv = String::from("timezero,unit,target,value\n");
    for tz in timezeros {
        for unit in UNITS {
            for (target, t) in TARGETS {
                if rng.gen_bool(0.85) {
                    let v = random_value(rng, t).1;
                    let v = v.as_str().map(String::from).unwrap_or_else(|| v.to_string());
                    csv.push_str(&format!("{tz},{unit},{target},{v}\n"));
                }
            }
        }
    }
    csv
}

fn target_type(name: &str) -> TargetType {
    TARGETS.iter().find(|(n, _)| *n == name).unwrap().1
}

/// Score keys `(model, timezero, unit, target, score id)` a forecast must
/// produce against `truth`. Interval scores expand to one id per central
/// level pair, or a single plain id when there is none.
fn expected_keys(
    model: &str,
    tz: &str,
    forecast: &Json,
    truth: &BTreeSet<(String, String, String)>,
) -> BTreeSet<(String, String, String, String, String)> {
    let mut ids: BTreeMap<(String, String), BTreeSet<String>> = BTreeMap::new();
    for p in forecast["predictions"].as_array().unwrap() {
        let unit = p["unit"].as_str().unwrap().to_string();
        let target = p["target"].as_str().unwrap().to_string();
        if !truth.contains(&(tz.to_string(), unit.clone(), target.clone())) {
            continue;
        }
        let kind = ElementKind::parse(p["class"].as_str().unwrap()).unwrap();
        let entry = ids.entry((unit, target.clone())).or_default();
        for score in expected_scores(target_type(&target), kind) {
            if score != "interval_score" {
                entry.insert(score.to_string());
                continue;
            }
            let levels: Vec<f64> = p["prediction"]["quantile"]
                .as_array()
                .unwrap()
                .iter()
                .map(|l| l.as_f64().unwrap())
                .collect();
            let mut paired = false;
            for &l in levels.iter().filter(|&&l| l < 0.5) {
                if levels.iter().any(|&m| (m - (1.0 - l)).abs() <= 1e-9) {
                    entry.insert(format!("interval_score_{}", 2.0 * l));
                    paired = true;
                }
            }
            if !paired {
                entry.insert("interval_score".to_string());
            }
        }
    }
    ids.into_iter()
        .flat_map(|((unit, target), scores)| {
            scores
                .into_iter()
                .map(move |s| (model.to_string(), tz.to_string(), unit.clone(), target.clone(), s))
        })
        .collect()
}

fn truth_cells(csv: &str) -> BTreeSet<(String, String, String)> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.splitn(4, ',').collect();
            (f[0].to_string(), f[1].to_string(), f[2].to_string())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Criterion 2

fn score_dispatch() -> Outcome {
    let mut populated = 0;
    for t in TYPES {
        for k in KINDS {
            let expected = expected_scores(t, k);
            let actual: BTreeSet<&str> = applicable_scores(t, k).iter().map(|s| s.as_str()).collect();
            ensure!(actual == expected, "({t:?}, {k:?}): library {actual:?}, table {expected:?}");
            ensure!(valid_cell(t, k) || expected.is_empty(), "scores listed for invalid cell ({t:?}, {k:?})");
            populated += usize::from(!expected.is_empty());
        }
    }
    ensure!(populated == 19, "{populated} populated cells, expected 19");

    let config = parse_project_config(SCENARIO_PROJECT.as_bytes()).map_err(|e| e.to_string())?;
    let mut runner = TestRunner::new(Config {
        cases: 64,
        failure_persistence: None,
        ..Config::default()
    });
    let records = std::cell::Cell::new(0usize);
    runner
        .run(&any::<u64>(), |seed| {
            let mut rng = StdRng::seed_from_u64(seed);
            let truth = parse_truth_csv(random_truth(&mut rng, &TIMEZEROS[..2]).as_bytes(), &config)
                .map_err(|e| TestCaseError::fail(e.to_string()))?
                .table;
            let mut forecasts = Vec::new();
            for model in ["m1", "m2"] {
                for tz in &TIMEZEROS[..3] {
                    forecasts.push(build_forecast(&config, model, tz, &random_forecast(&mut rng))?);
                }
            }
            let run = score_project(&config, &truth, &forecasts);
            for r in &run.records {
                let f = forecasts
                    .iter()
                    .find(|f| f.model == r.model && f.timezero == r.timezero)
                    .unwrap();
                let p = &f.predictions[&(r.unit.clone(), r.target.clone())];
                prop_assert!(p.get(r.class).is_some(), "record from an absent element: {r:?}");
                let t = target_type(&r.target);
                prop_assert!(
                    expected_scores(t, r.class).contains(r.score.kind.as_str()),
                    "score {} for ({t:?}, {:?}) is a '-' cell",
                    r.score,
                    r.class
                );
                prop_assert!(truth.get(r.timezero, &r.unit, &r.target).is_some(), "scored without truth");
            }
            records.set(records.get() + run.records.len());
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("19 populated cells match; {} random records all in populated cells", records.get()))
}

fn build_forecast(config: &ProjectConfig, model: &str, tz: &str, doc: &Json) -> Result<Forecast, TestCaseError> {
    let doc = parse_forecast(doc.to_string().as_bytes()).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let validated = check_forecast(&doc, config).map_err(|v| TestCaseError::fail(format!("{v:?}")))?;
    Ok(Forecast {
        model: model.to_string(),
        timezero: tz.parse().unwrap(),
        issued_at: Utc::now(),
        source: None,
        predictions: validated.predictions,
    })
}

// ---------------------------------------------------------------------------
// Criterion 3

const DRAW_SEED: u64 = 20_200_106;

fn continuous_target(name: &str, edges: &[f64]) -> TargetDefinition {
    TargetParts::new(name, TargetType::Continuous)
        .categories(edges.iter().map(|&e| Value::Float(e)).collect())
        .build()
        .unwrap()
}

fn discrete_target(name: &str, max: i64) -> TargetDefinition {
    TargetParts::new(name, TargetType::Discrete)
        .categories((0..=max).map(Value::Int).collect())
        .build()
        .unwrap()
}

fn conversion_consistency() -> Outcome {
    let n = 100_000;
    let cases: Vec<(&str, NamedDistribution<f64>, TargetDefinition)> = vec![
        ("norm(10,2)", NamedDistribution::norm(10.0, 2.0).unwrap(),
            continuous_target("x", &[-1.0e6, 7.0, 9.0, 10.0, 11.0, 13.0])),
        ("lnorm(1,0.5)", NamedDistribution::lnorm(1.0, 0.5).unwrap(),
            continuous_target("x", &[0.0, 1.5, 2.5, 3.5, 5.0])),
        ("gamma(4,0.5)", NamedDistribution::gamma(4.0, 0.5).unwrap(),
            continuous_target("x", &[0.0, 4.0, 6.0, 8.0, 10.0, 13.0])),
        ("pois(5)", NamedDistribution::pois(5.0).unwrap(), discrete_target("k", 40)),
        ("negbin(4,0.4)", NamedDistribution::negbin(4.0, 0.4).unwrap(), discrete_target("k", 120)),
        ("binom(20,0.3)", NamedDistribution::binom(20.0, 0.3).unwrap(), discrete_target("k", 20)),
    ];
    let mut worst = 0.0f64;
    for (label, named, target) in &cases {
        let sample = named_to_sample(named, n, DRAW_SEED);
        let empirical = sample_to_bin(&sample, target).map_err(|e| format!("{label}: {e}"))?;
        let exact = named_to_bin(named, target, 1e-6).map_err(|e| format!("{label}: {e}"))?;
        for ((cat, pe), (_, p)) in empirical.entries().iter().zip(exact.entries()) {
            let band = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
            let gap = (pe - p).abs();
            ensure!(gap <= band, "{label} bin {cat}: sample {pe}, exact {p}, band {band}");
            if band > 0.0 {
                worst = worst.max(gap / band);
            }
        }

        for level in [0.025, 0.25, 0.5, 0.75, 0.975] {
            let q = named.quantile(level);
            if named.family().is_discrete() {
                ensure!(
                    named.cdf(q) >= level - 1e-8 && named.cdf(q - 1.0) < level,
                    "{label}: {q} is not the generalised inverse at {level}"
                );
            } else {
                let back = named.cdf(q);
                ensure!((back - level).abs() <= 1e-8, "{label}: cdf(quantile({level})) = {back}");
            }
        }
    }
    Ok(format!("6 families; largest bin gap {:.2} of the 3-sigma band", worst))
}

// ---------------------------------------------------------------------------
// Criterion 4

fn crps_double_loop(xs: &[f64], y: f64) -> f64 {
    let n = xs.len() as f64;
    let spread: f64 = xs.iter().map(|x| (x - y).abs()).sum::<f64>() / n;
    let pairs: f64 = xs.iter().flat_map(|a| xs.iter().map(move |b| (a - b).abs())).sum();
    spread - pairs / (2.0 * n * n)
}

fn interval_direct(lower: f64, upper: f64, y: f64, alpha: f64) -> f64 {
    let mut s = upper - lower;
    if y < lower {
        s += 2.0 / alpha * (lower - y);
    }
    if y > upper {
        s += 2.0 / alpha * (y - upper);
    }
    s
}

/// erf by Abramowitz and Stegun 7.1.26, |error| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.327_591_1 * x.abs());
    let poly = t * (0.254_829_592 + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let r = 1.0 - poly * (-x * x).exp();
    if x >= 0.0 {
        r
    } else {
        -r
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn crps_normal(mu: f64, sigma: f64, y: f64) -> f64 {
    let z = (y - mu) / sigma;
    sigma * (z * (2.0 * std_normal_cdf(z) - 1.0) + 2.0 * std_normal_pdf(z) - 1.0 / std::f64::consts::PI.sqrt())
}

fn element_score(element: &PredictionElement, target: &TargetDefinition, y: f64, kind: ScoreKind) -> Option<f64> {
    score_element(element, target, &Value::Float(y), &[kind])
        .into_iter()
        .find(|s| s.score.kind == kind)
        .and_then(|s| s.value)
}

fn score_kernels() -> Outcome {
    let mut rng = StdRng::seed_from_u64(4);
    let mut worst_crps = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=50);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let y = rng.gen_range(-12.0..12.0);
        let got = kernels::crps_sample(&xs, y);
        let want = crps_double_loop(&xs, y);
        ensure!((got - want).abs() <= 1e-12, "sample CRPS {got} vs {want} for n = {n}");
        worst_crps = worst_crps.max((got - want).abs());
    }

    for _ in 0..1000 {
        let lower = rng.gen_range(-10.0..10.0);
        let upper = lower + rng.gen_range(0.0..10.0);
        let y = rng.gen_range(-15.0..15.0);
        let alpha = rng.gen_range(0.01..0.99);
        let got = kernels::interval_score(lower, upper, y, alpha);
        let want = interval_direct(lower, upper, y, alpha);
        ensure!(
            (got - want).abs() <= 1e-12 * want.abs().max(1.0),
            "interval score {got} vs {want} for ({lower}, {upper}, {y}, {alpha})"
        );
    }

    // The Monte Carlo error scales with sigma (about 0.01 sigma in the
    // tails for 10^4 draws), so the absolute tolerance is checked at unit
    // scale and below.
    let target = continuous_target("x", &[-1.0e6]);
    let mut worst_named = 0.0f64;
    for (mu, sigma) in [(0.0, 1.0), (10.0, 1.0), (-3.0, 0.5)] {
        let element = PredictionElement::Named(NamedDistribution::norm(mu, sigma).unwrap());
        for z in [-3.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0] {
            let y = mu + sigma * z;
            let got = element_score(&element, &target, y, ScoreKind::Crps).ok_or("no named CRPS")?;
            let want = crps_normal(mu, sigma, y);
            ensure!((got - want).abs() <= 0.02, "norm({mu},{sigma}) CRPS at {y}: {got} vs {want}");
            worst_named = worst_named.max((got - want).abs());
        }
    }
    Ok(format!(
        "sample CRPS max gap {worst_crps:.1e}; 1000 interval scores exact; named CRPS max gap {worst_named:.4}"
    ))
}

// ---------------------------------------------------------------------------
// Criterion 5

fn box_muller(rng: &mut StdRng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn propriety_and_calibration() -> Outcome {
    let n = 10_000;
    let mut rng = StdRng::seed_from_u64(5);
    let ys: Vec<f64> = (0..n).map(|_| box_muller(&mut rng)).collect();
    let standard = NamedDistribution::norm(0.0, 1.0).unwrap();
    let mut margins = Vec::new();
    for alpha in [0.1, 0.2, 0.5] {
        let lower = standard.quantile(alpha / 2.0);
        let upper = standard.quantile(1.0 - alpha / 2.0);
        for shift in [-0.5, 0.5] {
            let d: Vec<f64> = ys
                .iter()
                .map(|&y| {
                    kernels::interval_score(lower + shift, upper + shift, y, alpha)
                        - kernels::interval_score(lower, upper, y, alpha)
                })
                .collect();
            let mean = d.iter().sum::<f64>() / n as f64;
            let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let se = (var / n as f64).sqrt();
            ensure!(mean > 5.0 * se, "alpha {alpha}, shift {shift}: mean gain {mean}, se {se}");
            margins.push(mean / se);
        }
    }

    let target = continuous_target("x", &[-1.0e6]);
    let mut pits: Vec<f64> = Vec::with_capacity(n);
    for _ in 0..n {
        let mu = rng.gen_range(-5.0..5.0);
        let sigma = rng.gen_range(0.5..3.0);
        let y = mu + sigma * box_muller(&mut rng);
        let element = PredictionElement::Named(NamedDistribution::norm(mu, sigma).unwrap());
        pits.push(element_score(&element, &target, y, ScoreKind::Pit).ok_or("no PIT")?);
    }
    pits.sort_by(f64::total_cmp);
    let d = pits
        .iter()
        .enumerate()
        .map(|(i, &u)| ((i + 1) as f64 / n as f64 - u).max(u - i as f64 / n as f64))
        .fold(0.0f64, f64::max);
    let critical = 1.628 / (n as f64).sqrt();
    ensure!(d < critical, "PIT KS statistic {d} >= {critical}");
    let smallest = margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(format!("smallest shift penalty {smallest:.1} SE; PIT KS D = {d:.4} < {critical:.4}"))
}

// ---------------------------------------------------------------------------
// Criterion 6

type ScoreKey = (String, String, String, String, String);

fn download(h: &Harness, token: &str, path: &str) -> Vec<u8> {
    let resp = h.get(path, Some(token));
    assert_eq!(resp.status(), 200, "GET {path}");
    resp.bytes().unwrap().to_vec()
}

fn score_rows(h: &Harness, token: &str, project: i64, params: &str) -> BTreeMap<ScoreKey, (String, String)> {
    let bytes = download(h, token, &format!("/api/projects/{project}/scores?{params}"));
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let mut out = BTreeMap::new();
    for row in reader.records() {
        let r = row.unwrap();
        let key = (r[0].into(), r[1].into(), r[2].into(), r[3].into(), r[4].into());
        assert!(out.insert(key, (r[5].to_string(), r[6].to_string())).is_none(), "duplicate score row");
    }
    out
}

fn run_query(h: &Harness, token: &str, project: i64, filters: &Json) -> Result<Vec<Json>, String> {
    let resp = h.post_json(&format!("/api/projects/{project}/forecast_queries?format=json"), Some(token), filters);
    ensure!(resp.status() == 202, "query not accepted: {}", resp.status());
    let id = resp.json::<Json>().unwrap()["id"].as_u64().unwrap();
    let job = h.wait_job(id, Some(token));
    ensure!(job["status"] == "success", "query failed: {job}");
    let rows: Json = serde_json::from_slice(&download(h, token, &format!("/api/jobs/{id}?download=true")))
        .map_err(|e| e.to_string())?;
    Ok(rows.as_array().cloned().unwrap_or_default())
}

fn element_rows(forecast: &Json) -> usize {
    forecast["predictions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| {
            let body = &p["prediction"];
            match p["class"].as_str().unwrap() {
                "bin" => body["cat"].as_array().unwrap().len(),
                "sample" => body["sample"].as_array().unwrap().len(),
                "quantile" => body["quantile"].as_array().unwrap().len(),
                _ => 1,
            }
        })
        .sum()
}

fn end_to_end() -> Outcome {
    let h = Harness::start();
    let token = h.token("owner");
    let project = h.create_project(&token, SCENARIO_PROJECT);
    let mut rng = StdRng::seed_from_u64(6);

    let models = ["a", "b", "c"];
    let mut model_ids = BTreeMap::new();
    let mut docs: BTreeMap<(String, String), Json> = BTreeMap::new();
    for m in models {
        let id = h.add_model(&token, project, m);
        model_ids.insert(m, id);
        for tz in TIMEZEROS {
            let doc = random_forecast(&mut rng);
            let job = h.upload_forecast(&token, id, tz, &doc);
            ensure!(job["status"] == "success", "upload {m}/{tz} failed: {job}");
            docs.insert((m.to_string(), tz.to_string()), doc);
        }
    }
    // The last time-zero stays without truth.
    let truth_csv = random_truth(&mut rng, &TIMEZEROS[..4]);
    let job = h.upload_truth(&token, project, &truth_csv);
    ensure!(job["status"] == "success", "truth upload failed: {job}");
    h.svc.jobs().drain();

    let truth = truth_cells(&truth_csv);
    let oracle: BTreeSet<ScoreKey> = docs
        .iter()
        .flat_map(|((m, tz), doc)| expected_keys(m, tz, doc, &truth))
        .collect();
    let scores = score_rows(&h, &token, project, "");
    let actual: BTreeSet<ScoreKey> = scores.keys().cloned().collect();
    ensure!(
        actual == oracle,
        "{} score records, oracle expects {}; first difference {:?}",
        actual.len(),
        oracle.len(),
        actual.symmetric_difference(&oracle).next()
    );
    let stored = h.svc.store().query_scores(project, &ScoreQuery::default()).map_err(|e| e.to_string())?;
    ensure!(stored.len() == oracle.len(), "store holds {} records", stored.len());

    // Score filters select exact subsets.
    let filtered = score_rows(&h, &token, project, "models=a,c&units=U2&scores=crps,interval_score&timezeros=2020-01-13");
    let want: BTreeSet<ScoreKey> = oracle
        .iter()
        .filter(|k| {
            (k.0 == "a" || k.0 == "c")
                && k.2 == "U2"
                && k.1 == "2020-01-13"
                && (k.4 == "crps" || k.4.starts_with("interval_score"))
        })
        .cloned()
        .collect();
    ensure!(filtered.keys().cloned().collect::<BTreeSet<_>>() == want, "score filter subset differs");

    // Forecast queries select exact subsets of the full export.
    let all = run_query(&h, &token, project, &json!({}))?;
    let total_rows: usize = docs.values().map(element_rows).sum();
    ensure!(all.len() == total_rows, "full export has {} rows, uploads had {total_rows}", all.len());
    let filters = [
        json!({"models": ["b"], "types": ["quantile", "bin"]}),
        json!({"units": ["U3"], "targets": ["onset", "cases"], "timezeros": ["2020-01-13", "2020-02-03"]}),
        json!({"models": ["a", "c"], "units": ["U1"], "types": ["point"]}),
    ];
    for f in &filters {
        let got = run_query(&h, &token, project, f)?;
        let keep = |row: &Json, field: &str, key: &str| {
            f.get(key)
                .and_then(Json::as_array)
                .map_or(true, |allowed| allowed.contains(&row[field]))
        };
        let want: Vec<&Json> = all
            .iter()
            .filter(|r| {
                keep(r, "model", "models")
                    && keep(r, "unit", "units")
                    && keep(r, "target", "targets")
                    && keep(r, "timezero", "timezeros")
                    && keep(r, "class", "types")
            })
            .collect();
        ensure!(
            got.iter().collect::<Vec<_>>() == want,
            "filter {f}: {} rows, expected {}",
            got.len(),
            want.len()
        );
    }

    // Replacing one forecast rescores only that forecast.
    let replaced = ("a".to_string(), TIMEZEROS[0].to_string());
    let doc = random_forecast(&mut rng);
    let job = h.upload_forecast(&token, model_ids["a"], TIMEZEROS[0], &doc);
    ensure!(job["status"] == "success", "replacement failed: {job}");
    h.svc.jobs().drain();
    let after = score_rows(&h, &token, project, "");
    let is_replaced = |k: &ScoreKey| k.0 == replaced.0 && k.1 == replaced.1;
    let untouched_before: BTreeMap<_, _> = scores.iter().filter(|(k, _)| !is_replaced(k)).collect();
    let untouched_after: BTreeMap<_, _> = after.iter().filter(|(k, _)| !is_replaced(k)).collect();
    ensure!(untouched_before == untouched_after, "replacement changed other forecasts' scores");
    let fresh: BTreeSet<ScoreKey> = after.keys().filter(|k| is_replaced(k)).cloned().collect();
    ensure!(
        fresh == expected_keys(&replaced.0, &replaced.1, &doc, &truth),
        "replaced forecast has {} records",
        fresh.len()
    );
    let audit = h.svc.store().audit_log(model_ids["a"]).map_err(|e| e.to_string())?;
    ensure!(audit.len() == 1, "audit log has {} entries after one replacement", audit.len());

    Ok(format!(
        "{} score records match the oracle; {total_rows} element rows; {} filters exact; replacement isolated",
        oracle.len(),
        filters.len() + 1
    ))
}

// ---------------------------------------------------------------------------
// Criterion 7

fn throughput() -> Outcome {
    const UNITS_N: usize = 100;
    const TARGETS_N: usize = 10;
    const SAMPLE_N: usize = 90;
    let levels: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();

    let config = json!({
        "name": "throughput",
        "units": (0..UNITS_N).map(|u| json!({"code": format!("u{u:03}")})).collect::<Vec<_>>(),
        "targets": (0..TARGETS_N)
            .map(|t| json!({"name": format!("t{t}"), "type": "continuous", "range": [0, 1.0e6]}))
            .collect::<Vec<_>>(),
        "timezeros": [{"date": "2020-01-06"}]
    });
    let h = Harness::start();
    let token = h.token("owner");
    let project = h.create_project(&token, &config.to_string());
    let model = h.add_model(&token, project, "bulk");

    let mut rng = StdRng::seed_from_u64(7);
    let mut predictions = Vec::with_capacity(UNITS_N * TARGETS_N * 3);
    let mut truth = String::from("timezero,unit,target,value\n");
    for u in 0..UNITS_N {
        for t in 0..TARGETS_N {
            let (unit, target) = (format!("u{u:03}"), format!("t{t}"));
            let centre = rng.gen_range(100.0..1000.0);
            let mut sample: Vec<f64> = (0..SAMPLE_N)
                .map(|_| (centre + 50.0 * box_muller(&mut rng)).max(0.0))
                .collect();
            predictions.push(json!({"unit": unit, "target": target, "class": "point", "prediction": {"value": centre}}));
            predictions.push(json!({"unit": unit, "target": target, "class": "sample", "prediction": {"sample": sample}}));
            sample.sort_by(f64::total_cmp);
            let quantiles: Vec<f64> = levels.iter().map(|l| sample[(l * SAMPLE_N as f64) as usize - 1]).collect();
            predictions.push(json!({
                "unit": unit, "target": target, "class": "quantile",
                "prediction": {"quantile": levels, "value": quantiles}
            }));
            truth.push_str(&format!("2020-01-06,{unit},{target},{}\n", (centre + 40.0).round()));
        }
    }
    let forecast = json!({"predictions": predictions});
    let rows = element_rows(&forecast);
    ensure!(rows == 100_000, "generated {rows} rows");

    let job = h.upload_forecast(&token, model, "2020-01-06", &forecast);
    ensure!(job["status"] == "success", "upload failed: {job}");
    let job = h.upload_truth(&token, project, &truth);
    ensure!(job["status"] == "success", "truth upload failed: {job}");
    h.svc.jobs().drain();

    // error, abs_error, crps, log_score, pit and four interval alphas.
    let scored = h.svc.store().query_scores(project, &ScoreQuery::default()).map_err(|e| e.to_string())?;
    ensure!(scored.len() == UNITS_N * TARGETS_N * 9, "{} score records", scored.len());

    let resp = h.post_json(&format!("/api/projects/{project}/forecast_queries"), Some(&token), &json!({}));
    ensure!(resp.status() == 202, "query not accepted");
    let id = resp.json::<Json>().unwrap()["id"].as_u64().unwrap();
    let job = h.wait_job(id, Some(&token));
    ensure!(job["status"] == "success", "export failed: {job}");
    let csv = download(&h, &token, &format!("/api/jobs/{id}?download=true"));
    let exported = csv::Reader::from_reader(csv.as_slice()).records().count();
    ensure!(exported == 100_000, "exported {exported} rows");
    Ok(format!("{exported} rows uploaded, validated, scored ({} records) and exported", scored.len()))
}

// ---------------------------------------------------------------------------
// Criterion 8

const AUDIT_PROJECT: &str = r#"{
  "name": "audit",
  "units": [{"code": "US"}],
  "targets": [{"name": "cases", "type": "continuous"}],
  "timezeros": [{"date": "2020-01-06"}]
}"#;

fn audit_trail() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("archive.db");
    let h = Harness::with_store(Store::open(&path).map_err(|e| e.to_string())?);
    let token = h.token("owner");
    let project = h.create_project(&token, AUDIT_PROJECT);
    let model = h.add_model(&token, project, "m");
    let upload_path = format!("/api/models/{model}/forecasts");
    let forecast = |v: usize| json!({"predictions": [
        {"unit": "US", "target": "cases", "class": "point", "prediction": {"value": v}}
    ]});

    let client_dated = [
        json!({"timezero": "2020-01-06", "issued_at": "2020-01-01T00:00:00Z", "forecast": forecast(0)}),
        json!({"timezero": "2020-01-06", "forecast": {"issued_at": "2020-01-01T00:00:00Z", "predictions": []}}),
    ];
    for body in &client_dated {
        let status = h.post_json(&upload_path, Some(&token), body).status();
        ensure!(status == 400, "client issue date answered {status}");
    }

    let before = Utc::now();
    let job = h.upload_forecast(&token, model, "2020-01-06", &forecast(0));
    let after = Utc::now();
    ensure!(job["status"] == "success", "upload failed: {job}");
    let first: DateTime<Utc> = job["result"]["issued_at"]
        .as_str()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("no issue date in {job}"))?;
    ensure!(before <= first && first <= after, "issue date {first} outside [{before}, {after}]");

    for v in 1..=100 {
        let job = h.upload_forecast(&token, model, "2020-01-06", &forecast(v));
        ensure!(job["status"] == "success", "replacement {v} failed: {job}");
    }
    let audit = h.svc.store().audit_log(model).map_err(|e| e.to_string())?;
    ensure!(audit.len() == 100, "audit log has {} entries", audit.len());
    ensure!(audit[0].issued_at == first, "first audit entry is not the first upload");
    for pair in audit.windows(2) {
        ensure!(pair[0].seq < pair[1].seq, "audit sequence not increasing");
        ensure!(pair[0].issued_at < pair[1].issued_at, "issue dates not increasing");
        ensure!(pair[0].superseded_at == pair[1].issued_at, "supersession chain broken");
    }
    ensure!(audit.iter().all(|e| e.issued_at < e.superseded_at), "entry superseded before issue");
    let current = h.svc.store().forecasts(project, Some(model)).map_err(|e| e.to_string())?;
    ensure!(
        current.len() == 1 && current[0].issued_at == audit[99].superseded_at,
        "current forecast does not close the chain"
    );

    let conn = rusqlite::Connection::open(&path).map_err(|e| e.to_string())?;
    ensure!(
        conn.execute("UPDATE forecast_audit SET source = 'edited'", []).is_err(),
        "audit rows can be updated"
    );
    ensure!(conn.execute("DELETE FROM forecast_audit", []).is_err(), "audit rows can be deleted");
    let rows: i64 = conn
        .query_row("SELECT COUNT(*) FROM forecast_audit", [], |r| r.get(0))
        .map_err(|e| e.to_string())?;
    ensure!(rows == 100, "{rows} audit rows after tampering attempts");
    Ok("client issue dates rejected; 100 replacements logged in order; audit table append-only".into())
}
