//! Time-series export for plotting step-ahead point forecasts against the
//! observed series.

use std::collections::BTreeMap;

use chrono::{Months, NaiveDate};
use farc_core::conversion::{to_point, PointMethod};
use farc_core::model::{ElementKind, Forecast, Prediction, PredictionElement, TargetDefinition, Value};
use farc_core::{ProjectConfig, TruthTable};
use serde_json::{json, Value as Json};

/// Date a step-ahead target refers to, when its step unit is calendar based.
pub fn step_date(timezero: NaiveDate, unit: Option<&str>, count: u32) -> Option<NaiveDate> {
    let unit = unit?.trim().to_ascii_lowercase();
    match unit.trim_end_matches('s') {
        "day" => timezero.checked_add_days(chrono::Days::new(count.into())),
        "week" => timezero.checked_add_days(chrono::Days::new(7 * u64::from(count))),
        "month" => timezero.checked_add_months(Months::new(count)),
        "year" => timezero.checked_add_months(Months::new(12 * count)),
        _ => None,
    }
}

/// Point summary of a prediction: its point element, else the median of
/// the first probabilistic element available.
fn point_of(prediction: &Prediction, target: &TargetDefinition) -> Option<Value> {
    if let Some(PredictionElement::Point(v)) = prediction.get(ElementKind::Point) {
        return Some(v.clone());
    }
    [ElementKind::Named, ElementKind::Sample, ElementKind::Quantile, ElementKind::Bin]
        .into_iter()
        .filter_map(|k| prediction.get(k))
        .find_map(|e| to_point(e, PointMethod::Median, target).ok())
}

/// One truth series plus one trace per (model, time-zero) with at least one
/// point, over the step-ahead targets whose names start with `prefix`.
pub fn plot_data(
    config: &ProjectConfig,
    truth: &TruthTable,
    forecasts: &[Forecast],
    unit: &str,
    prefix: &str,
) -> Result<Json, String> {
    if config.unit(unit).is_none() {
        return Err(format!("unknown unit {unit:?}"));
    }
    let mut targets: Vec<&TargetDefinition> = config
        .targets
        .iter()
        .filter(|t| t.is_step_ahead() && t.name().starts_with(prefix))
        .collect();
    if targets.is_empty() {
        return Err(format!("no step-ahead targets start with {prefix:?}"));
    }
    targets.sort_by_key(|t| (t.step_count().unwrap_or(0), t.name().to_string()));

    let mut timezeros: Vec<NaiveDate> = config.timezeros.iter().map(|t| t.date).collect();
    timezeros.sort();
    // Keyed by the date observed; the shortest horizon wins on collisions.
    let mut observed: BTreeMap<NaiveDate, Json> = BTreeMap::new();
    for &tz in &timezeros {
        for t in &targets {
            let step = t.step_count().unwrap_or(0);
            let (Some(date), Some(value)) = (step_date(tz, t.step_unit(), step), truth.get(tz, unit, t.name())) else {
                continue;
            };
            observed.entry(date).or_insert_with(|| {
                json!({"date": date, "value": value, "timezero": tz, "target": t.name()})
            });
        }
    }

    let mut sorted: Vec<&Forecast> = forecasts.iter().collect();
    sorted.sort_by(|a, b| (&a.model, a.timezero).cmp(&(&b.model, b.timezero)));
    let mut traces = Vec::new();
    for f in sorted {
        let points: Vec<Json> = targets
            .iter()
            .filter_map(|t| {
                let prediction = f.predictions.get(&(unit.to_string(), t.name().to_string()))?;
                let value = point_of(prediction, t)?;
                let step = t.step_count().unwrap_or(0);
                Some(json!({
                    "target": t.name(),
                    "step": step,
                    "date": step_date(f.timezero, t.step_unit(), step),
                    "value": value,
                }))
            })
            .collect();
        if !points.is_empty() {
            traces.push(json!({"model": f.model, "timezero": f.timezero, "points": points}));
        }
    }

    Ok(json!({
        "project": config.name,
        "unit": unit,
        "target_prefix": prefix,
        "targets": targets.iter().map(|t| t.name()).collect::<Vec<_>>(),
        "truth": {"name": "truth", "points": observed.into_values().collect::<Vec<_>>()},
        "traces": traces,
    }))
}
