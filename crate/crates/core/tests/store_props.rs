use std::collections::BTreeMap;

use farc_core::format::parse_project_config;
use farc_core::model::{parse_iso_date, ElementKind, ModelInfo, NamedDistribution, Prediction, PredictionKey};
use farc_core::store::{ForecastQuery, QueryRow, Store};
use farc_core::{BinElement, PredictionElement, ProjectConfig, QuantileElement, SampleElement, Value};
use proptest::prelude::*;

const UNITS: [&str; 3] = ["u1", "u2", "u3"];
const TARGETS: [&str; 2] = ["cases", "peak"];
const TIMEZEROS: [&str; 2] = ["2021-03-01", "2021-03-08"];
const MODELS: [&str; 3] = ["alpha", "beta", "gamma"];

fn project() -> ProjectConfig {
    parse_project_config(
        br#"{"name":"store-props","units":[{"code":"u1"},{"code":"u2"},{"code":"u3"}],
            "targets":[{"name":"cases","type":"continuous","cats":[0,10,20]},
                       {"name":"peak","type":"discrete","cats":[0,1,2]}],
            "timezeros":[{"date":"2021-03-01"},{"date":"2021-03-08"}]}"#,
    )
    .unwrap()
}

fn element(target: usize) -> impl Strategy<Value = PredictionElement> {
    let value = move |x: i64| {
        if target == 0 {
            Value::Float(x as f64 / 4.0)
        } else {
            Value::Int(x)
        }
    };
    prop_oneof![
        (0i64..100).prop_map(move |x| PredictionElement::Point(value(x))),
        (0.5f64..50.0, 0.5f64..5.0).prop_map(move |(a, b)| {
            let named = if target == 0 {
                NamedDistribution::norm(a, b)
            } else {
                NamedDistribution::pois(a)
            };
            PredictionElement::Named(named.unwrap())
        }),
        prop::collection::vec(1u32..10, 3).prop_map(move |w| {
            let total: u32 = w.iter().sum();
            let entries = w
                .iter()
                .enumerate()
                .map(|(k, &x)| (value(k as i64 * if target == 0 { 40 } else { 1 }), x as f64 / total as f64))
                .collect();
            PredictionElement::Bin(BinElement::new(entries, 1e-3).unwrap())
        }),
        prop::collection::vec(0i64..100, 1..8)
            .prop_map(move |v| PredictionElement::Sample(SampleElement::new(v.into_iter().map(value).collect()).unwrap())),
        prop::collection::btree_set(0i64..100, 1..4).prop_map(move |v| {
            let n = v.len() as f64;
            let entries = v
                .into_iter()
                .enumerate()
                .map(|(i, x)| ((i as f64 + 1.0) / (n + 1.0), value(x)))
                .collect();
            PredictionElement::Quantile(QuantileElement::new(entries).unwrap())
        }),
    ]
}

fn prediction(target: usize) -> impl Strategy<Value = Prediction> {
    prop::collection::vec(element(target), 1..4).prop_map(|elements| {
        let mut p = Prediction::new();
        for e in elements {
            // Repeated kinds are dropped; one element per kind.
            let _ = p.insert(e);
        }
        p
    })
}

fn forecast() -> impl Strategy<Value = BTreeMap<PredictionKey, Prediction>> {
    let cell = (0usize..3, 0usize..2).prop_flat_map(|(u, t)| {
        prediction(t).prop_map(move |p| ((UNITS[u].to_string(), TARGETS[t].to_string()), p))
    });
    prop::collection::vec(cell, 0..5).prop_map(|cells| cells.into_iter().collect())
}

type Archive = Vec<(usize, usize, BTreeMap<PredictionKey, Prediction>)>;

fn archive() -> impl Strategy<Value = Archive> {
    prop::collection::vec((0usize..3, 0usize..2, forecast()), 1..6)
}

fn subset(names: &'static [&'static str]) -> impl Strategy<Value = Vec<String>> {
    prop::sample::subsequence(names.to_vec(), 0..=names.len())
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn query() -> impl Strategy<Value = ForecastQuery> {
    (
        subset(&MODELS),
        subset(&UNITS),
        subset(&TARGETS),
        subset(&TIMEZEROS),
        prop::sample::subsequence(ElementKind::ALL.to_vec(), 0..=5),
    )
        .prop_map(|(models, units, targets, timezeros, types)| ForecastQuery {
            models,
            units,
            targets,
            timezeros: timezeros.iter().map(|d| parse_iso_date(d).unwrap()).collect(),
            types,
        })
}

fn populate(archive: &Archive) -> (Store, i64) {
    let store = Store::open_in_memory().unwrap();
    let pid = store.create_project(&project(), None).unwrap();
    let ids: Vec<i64> = MODELS
        .iter()
        .map(|m| {
            let info = ModelInfo {
                name: m.to_string(),
                abbreviation: m.to_string(),
                team: String::new(),
                description: String::new(),
                owners: vec![],
            };
            store.add_model(pid, &info, None).unwrap()
        })
        .collect();
    for (m, t, preds) in archive {
        store
            .register_forecast(ids[*m], parse_iso_date(TIMEZEROS[*t]).unwrap(), None, preds)
            .unwrap();
    }
    (store, pid)
}

fn matches(filter: &[String], value: &str) -> bool {
    filter.is_empty() || filter.iter().any(|f| f == value)
}

fn collect(store: &Store, pid: i64, q: &ForecastQuery) -> Vec<QueryRow> {
    let mut rows = Vec::new();
    store
        .query_forecasts(pid, q, |r| {
            rows.push(r);
            Ok(())
        })
        .unwrap();
    rows
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn filtered_query_equals_filtered_scan(archive in archive(), q in query()) {
        let (store, pid) = populate(&archive);
        let all = collect(&store, pid, &ForecastQuery::default());
        let expected: Vec<QueryRow> = all
            .into_iter()
            .filter(|r| {
                matches(&q.models, &r.model)
                    && matches(&q.units, &r.unit)
                    && matches(&q.targets, &r.target)
                    && (q.timezeros.is_empty() || q.timezeros.contains(&r.timezero))
                    && (q.types.is_empty() || q.types.contains(&r.class))
            })
            .collect();
        prop_assert_eq!(collect(&store, pid, &q), expected);
    }

    #[test]
    fn scan_is_sorted_and_forecasts_round_trip(archive in archive()) {
        let (store, pid) = populate(&archive);
        let rows = collect(&store, pid, &ForecastQuery::default());
        let keys: Vec<_> = rows
            .iter()
            .map(|r| (r.model.clone(), r.timezero, r.unit.clone(), r.target.clone(), r.class, r.index))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        prop_assert_eq!(keys, sorted);

        // The last registration per (model, time-zero) wins.
        let mut latest: BTreeMap<(usize, usize), &BTreeMap<PredictionKey, Prediction>> = BTreeMap::new();
        for (m, t, preds) in &archive {
            latest.insert((*m, *t), preds);
        }
        let stored = store.forecasts(pid, None).unwrap();
        prop_assert_eq!(stored.len(), latest.len());
        for f in stored {
            let m = MODELS.iter().position(|x| *x == f.model).unwrap();
            let t = TIMEZEROS.iter().position(|x| parse_iso_date(x).unwrap() == f.timezero).unwrap();
            let loaded = store.load_forecast(f.id).unwrap();
            prop_assert_eq!(&loaded.predictions, latest[&(m, t)]);
        }
    }
}
