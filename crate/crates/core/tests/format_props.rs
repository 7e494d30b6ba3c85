use farc_core::format::{
    parse_forecast, parse_project_config, parse_truth_csv, parse_upload, project_template,
    serialize_forecast, serialize_project_config, serialize_truth_csv, serialize_upload, ForecastDocument,
    Payload, PredictionRecord, TruthRow, UploadEnvelope, WireValue,
};
use farc_core::model::{parse_iso_date, Family};
use farc_core::validation::validate_forecast;
use farc_core::{ProjectConfig, TruthTable, Value};
use proptest::prelude::*;

fn project() -> ProjectConfig {
    parse_project_config(
        br#"{"name":"props","units":[{"code":"u1"},{"code":"u2"}],
            "targets":[{"name":"cont","type":"continuous","range":[0,10],"cats":[0,2,5]},
                       {"name":"disc","type":"discrete","cats":[0,1,2,3]},
                       {"name":"nom","type":"nominal","cats":["a","b","c"]},
                       {"name":"bin","type":"binary"},
                       {"name":"day","type":"date","cats":["2020-01-01","2020-01-08"]}],
            "timezeros":[{"date":"2020-01-01"},{"date":"2020-01-08"}]}"#,
    )
    .unwrap()
}

fn wire() -> impl Strategy<Value = WireValue> {
    prop_oneof![
        (-1000i64..1000).prop_map(WireValue::Int),
        (-1e6f64..1e6).prop_map(WireValue::Float),
        "[a-c]{1,3}".prop_map(WireValue::Text),
        any::<bool>().prop_map(WireValue::Bool),
    ]
}

fn payload() -> impl Strategy<Value = Payload> {
    prop_oneof![
        wire().prop_map(|value| Payload::Point { value }),
        (0usize..6, 0.1f64..10.0, prop::option::of(0.01f64..0.99)).prop_map(|(f, p1, p2)| Payload::Named {
            family: Family::ALL[f],
            param1: p1,
            param2: p2,
        }),
        prop::collection::vec((wire(), 0.0f64..1.0), 1..5).prop_map(|v| {
            let (cat, prob) = v.into_iter().unzip();
            Payload::Bin { cat, prob }
        }),
        prop::collection::vec(wire(), 1..6).prop_map(|sample| Payload::Sample { sample }),
        prop::collection::vec((0.0f64..1.0, wire()), 1..5).prop_map(|v| {
            let (quantile, value) = v.into_iter().unzip();
            Payload::Quantile { quantile, value }
        }),
    ]
}

fn record() -> impl Strategy<Value = PredictionRecord> {
    (
        prop::sample::select(vec!["u1", "u2", "zz"]),
        prop::sample::select(vec!["cont", "disc", "nom", "bin", "day"]),
        payload(),
    )
        .prop_map(|(u, t, payload)| PredictionRecord {
            unit: u.into(),
            target: t.into(),
            payload,
        })
}

fn document() -> impl Strategy<Value = ForecastDocument> {
    prop::collection::vec(record(), 0..12).prop_map(|predictions| ForecastDocument { predictions })
}

fn violation_lines(doc: &ForecastDocument, project: &ProjectConfig) -> Vec<String> {
    let mut lines: Vec<String> = validate_forecast(doc, project)
        .iter()
        .map(|v| format!("{} {:?} {:?} {:?}", v.rule_id, v.unit, v.target, v.class))
        .collect();
    lines.sort();
    lines
}

proptest! {
    #[test]
    fn forecast_json_round_trips(doc in document()) {
        let bytes = serialize_forecast(&doc);
        prop_assert_eq!(parse_forecast(&bytes).unwrap(), doc);
    }

    #[test]
    fn upload_envelope_round_trips(doc in document(), day in 0u32..28, source in prop::option::of("[a-z]{1,8}\\.json")) {
        let envelope = UploadEnvelope {
            timezero: parse_iso_date(&format!("2020-02-{:02}", day + 1)).unwrap(),
            source,
            forecast: doc,
        };
        prop_assert_eq!(parse_upload(&serialize_upload(&envelope)).unwrap(), envelope);
    }

    #[test]
    fn validation_ignores_record_order(doc in document(), seed in any::<u64>()) {
        let project = project();
        let mut shuffled = doc.clone();
        // Deterministic Fisher-Yates driven by the generated seed.
        let mut state = seed;
        for i in (1..shuffled.predictions.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let j = (state >> 33) as usize % (i + 1);
            shuffled.predictions.swap(i, j);
        }
        prop_assert_eq!(violation_lines(&doc, &project), violation_lines(&shuffled, &project));
    }

    #[test]
    fn truth_csv_round_trips(values in prop::collection::vec((0usize..2, 0usize..2, -100f64..100.0), 0..8)) {
        let project = project();
        let tz = ["2020-01-01", "2020-01-08"];
        let units = ["u1", "u2"];
        let table: TruthTable = values
            .iter()
            .map(|&(t, u, x)| TruthRow {
                timezero: parse_iso_date(tz[t]).unwrap(),
                unit: units[u].into(),
                target: "cont".into(),
                value: Value::Float(x),
            })
            .collect();
        let parsed = parse_truth_csv(&serialize_truth_csv(&table), &project).unwrap();
        prop_assert!(parsed.warnings.is_empty());
        prop_assert_eq!(parsed.table, table);
    }
}

#[test]
fn project_config_round_trips() {
    for config in [project(), project_template()] {
        let bytes = serialize_project_config(&config);
        assert_eq!(parse_project_config(&bytes).unwrap(), config);
    }
}
