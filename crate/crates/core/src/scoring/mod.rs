//! Score dispatch and per-forecast scoring.
//!
//! [`applicable_scores`] decides which scores each (target type, element
//! kind) pair receives. Scoring a forecast yields one [`ScoreRecord`] per
//! (model, time-zero, unit, target, score id). When several elements of one
//! prediction offer the same score, the element earliest in
//! [`ELEMENT_PRECEDENCE`] supplies it.

pub mod kernels;

use std::cmp::Ordering;
use std::fmt;

use chrono::NaiveDate;
use serde::Serialize;

use crate::format::{ProjectConfig, TruthTable};
use crate::model::{
    ElementKind, Forecast, Prediction, PredictionElement, TargetDefinition, TargetType, Value,
};

pub use kernels::PROBABILITY_FLOOR;

/// Draws used for the CRPS of named elements.
pub const NAMED_CRPS_DRAWS: usize = 10_000;
/// Fixed seed for named-element CRPS sampling.
pub const NAMED_CRPS_SEED: u64 = 0x5EED_C2B5;

/// Element consulted first when two elements share a score id.
pub const ELEMENT_PRECEDENCE: [ElementKind; 5] = [
    ElementKind::Named,
    ElementKind::Bin,
    ElementKind::Sample,
    ElementKind::Point,
    ElementKind::Quantile,
];

pub const SCORE_CSV_HEADER: [&str; 7] = ["model", "timezero", "unit", "target", "score", "value", "flag"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Error,
    AbsError,
    LogScore,
    Pit,
    IntervalScore,
    Crps,
    Brier,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 7] = [
        ScoreKind::Error,
        ScoreKind::AbsError,
        ScoreKind::LogScore,
        ScoreKind::Pit,
        ScoreKind::IntervalScore,
        ScoreKind::Crps,
        ScoreKind::Brier,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Error => "error",
            ScoreKind::AbsError => "abs_error",
            ScoreKind::LogScore => "log_score",
            ScoreKind::Pit => "pit",
            ScoreKind::IntervalScore => "interval_score",
            ScoreKind::Crps => "crps",
            ScoreKind::Brier => "brier",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scores for one (target type, element kind) cell, in [`ScoreKind`] order.
pub fn applicable_scores(target_type: TargetType, kind: ElementKind) -> &'static [ScoreKind] {
    use ElementKind as E;
    use ScoreKind::*;
    use TargetType as T;
    match (target_type, kind) {
        (T::Continuous | T::Discrete | T::Date | T::Binary, E::Point) => &[Error, AbsError, Crps],
        (T::Nominal, E::Point) => &[],
        (T::Continuous | T::Discrete, E::Named) => &[LogScore, Pit, Crps],
        (T::Continuous | T::Discrete | T::Date, E::Bin) => &[LogScore, Pit, Crps, Brier],
        (T::Nominal, E::Bin) => &[LogScore, Brier],
        (T::Binary, E::Bin) => &[LogScore, Crps, Brier],
        (T::Continuous | T::Discrete | T::Date, E::Sample) => &[LogScore, Pit, Crps],
        (T::Nominal, E::Sample) => &[LogScore, Brier],
        (T::Binary, E::Sample) => &[LogScore, Crps, Brier],
        (T::Continuous | T::Discrete | T::Date, E::Quantile) => &[IntervalScore],
        _ => &[],
    }
}

/// A score kind, with the interval's alpha for interval scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreId {
    pub kind: ScoreKind,
    pub alpha: Option<f64>,
}

impl ScoreId {
    pub fn plain(kind: ScoreKind) -> Self {
        ScoreId { kind, alpha: None }
    }

    pub fn interval(alpha: f64) -> Self {
        ScoreId {
            kind: ScoreKind::IntervalScore,
            alpha: Some(alpha),
        }
    }

    /// Parses `crps`, `interval_score`, `interval_score_0.1`, ...
    pub fn parse(s: &str) -> Option<Self> {
        if let Some(kind) = ScoreKind::parse(s) {
            return Some(ScoreId::plain(kind));
        }
        let alpha: f64 = s.strip_prefix("interval_score_")?.parse().ok()?;
        (alpha > 0.0 && alpha < 1.0).then(|| ScoreId::interval(alpha))
    }
}

impl fmt::Display for ScoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.alpha {
            Some(a) => write!(f, "{}_{}", self.kind, a),
            None => f.write_str(self.kind.as_str()),
        }
    }
}

impl Eq for ScoreId {}

impl Ord for ScoreId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.kind.cmp(&other.kind).then_with(|| {
            self.alpha
                .unwrap_or(-1.0)
                .total_cmp(&other.alpha.unwrap_or(-1.0))
        })
    }
}

impl PartialOrd for ScoreId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Why a score carries no value or a clamped one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreFlag {
    ZeroProbClamped,
    TruthOutOfRange,
    NoBinningBasis,
    NoIntervalPair,
    TruthMissing,
}

impl ScoreFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreFlag::ZeroProbClamped => "zero-prob-clamped",
            ScoreFlag::TruthOutOfRange => "truth-out-of-range",
            ScoreFlag::NoBinningBasis => "no-binning-basis",
            ScoreFlag::NoIntervalPair => "no-interval-pair",
            ScoreFlag::TruthMissing => "truth-missing",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            ScoreFlag::ZeroProbClamped,
            ScoreFlag::TruthOutOfRange,
            ScoreFlag::NoBinningBasis,
            ScoreFlag::NoIntervalPair,
            ScoreFlag::TruthMissing,
        ]
        .into_iter()
        .find(|f| f.as_str() == s)
    }
}

impl fmt::Display for ScoreFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A score computed for one element of one prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementScore {
    pub score: ScoreId,
    pub class: ElementKind,
    pub value: Option<f64>,
    pub flag: Option<ScoreFlag>,
}

impl ElementScore {
    fn value(score: ScoreId, class: ElementKind, value: f64) -> Self {
        ElementScore {
            score,
            class,
            value: Some(value),
            flag: None,
        }
    }

    fn flagged(score: ScoreId, class: ElementKind, flag: ScoreFlag) -> Self {
        ElementScore {
            score,
            class,
            value: None,
            flag: Some(flag),
        }
    }

    fn log(class: ElementKind, p: f64) -> Self {
        let (v, clamped) = kernels::clamped_ln(p);
        ElementScore {
            score: ScoreId::plain(ScoreKind::LogScore),
            class,
            value: Some(v),
            flag: clamped.then_some(ScoreFlag::ZeroProbClamped),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRecord {
    pub model: String,
    pub timezero: NaiveDate,
    pub unit: String,
    pub target: String,
    pub score: ScoreId,
    /// Element that produced the score.
    pub class: ElementKind,
    pub value: Option<f64>,
    pub flag: Option<ScoreFlag>,
}

impl ScoreRecord {
    pub fn sort_key(&self) -> (&str, NaiveDate, &str, &str, ScoreId) {
        (&self.model, self.timezero, &self.unit, &self.target, self.score)
    }
}

/// A (forecast, unit, target, score) that awaits truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Deferral {
    pub model: String,
    pub timezero: NaiveDate,
    pub unit: String,
    pub target: String,
    pub score: ScoreKind,
    pub class: ElementKind,
    pub flag: ScoreFlag,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreRun {
    pub records: Vec<ScoreRecord>,
    pub deferrals: Vec<Deferral>,
}

/// Numeric view of a value: days for dates, 0/1 for booleans.
fn numeric(v: &Value) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

fn numeric_values(values: &[Value]) -> Vec<f64> {
    values.iter().map(numeric).collect()
}

/// Scores of one element against the observed value, restricted to
/// `kinds`.
pub fn score_element(
    element: &PredictionElement,
    target: &TargetDefinition,
    truth: &Value,
    kinds: &[ScoreKind],
) -> Vec<ElementScore> {
    let class = element.kind();
    let y = numeric(truth);
    let mut out = Vec::new();
    for &kind in applicable_scores(target.target_type(), class) {
        if !kinds.contains(&kind) {
            continue;
        }
        let id = ScoreId::plain(kind);
        match element {
            PredictionElement::Point(x) => {
                let residual = y - numeric(x);
                let v = match kind {
                    ScoreKind::Error => residual,
                    _ => residual.abs(),
                };
                out.push(ElementScore::value(id, class, v));
            }
            PredictionElement::Named(n) => out.push(match kind {
                ScoreKind::LogScore => ElementScore::log(class, n.ln_density(y).exp()),
                ScoreKind::Pit => ElementScore::value(id, class, n.cdf(y)),
                _ => {
                    let draws = n.draw(NAMED_CRPS_DRAWS, NAMED_CRPS_SEED);
                    ElementScore::value(id, class, kernels::crps_sample(&draws, y))
                }
            }),
            PredictionElement::Bin(b) => {
                let Some(cats) = target.bin_categories() else {
                    out.push(ElementScore::flagged(id, class, ScoreFlag::NoBinningBasis));
                    continue;
                };
                let probs = b.probabilities_over(&cats);
                let bin = target.bin_index(truth);
                out.push(match (kind, bin) {
                    (ScoreKind::Crps, _) => {
                        let reps = numeric_values(&cats);
                        let widths: Vec<f64> = (0..cats.len()).map(|k| target.bin_width(k)).collect();
                        ElementScore::value(id, class, kernels::crps_bins(&probs, &reps, &widths, y))
                    }
                    (ScoreKind::Brier, _) if target.target_type() == TargetType::Binary => {
                        let p_true = b.probability_of(&Value::Bool(true));
                        ElementScore::value(id, class, kernels::brier_binary(p_true, *truth == Value::Bool(true)))
                    }
                    (_, None) => ElementScore::flagged(id, class, ScoreFlag::TruthOutOfRange),
                    (ScoreKind::LogScore, Some(k)) => ElementScore::log(class, probs[k]),
                    (ScoreKind::Pit, Some(k)) => {
                        ElementScore::value(id, class, probs[..=k].iter().sum::<f64>().min(1.0))
                    }
                    (_, Some(k)) => ElementScore::value(id, class, kernels::brier(&probs, k)),
                });
            }
            PredictionElement::Sample(s) => {
                let n = s.len() as f64;
                let categorical = matches!(target.target_type(), TargetType::Nominal | TargetType::Binary);
                out.push(match kind {
                    ScoreKind::LogScore if categorical => {
                        let hits = s.values().iter().filter(|v| *v == truth).count();
                        ElementScore::log(class, hits as f64 / n)
                    }
                    ScoreKind::LogScore => {
                        if target.bin_categories().is_none() {
                            ElementScore::flagged(id, class, ScoreFlag::NoBinningBasis)
                        } else if let Some(k) = target.bin_index(truth) {
                            let hits = s
                                .values()
                                .iter()
                                .filter(|v| target.bin_index(v) == Some(k))
                                .count();
                            ElementScore::log(class, hits as f64 / n)
                        } else {
                            ElementScore::flagged(id, class, ScoreFlag::TruthOutOfRange)
                        }
                    }
                    ScoreKind::Pit => {
                        ElementScore::value(id, class, kernels::pit_sample(&numeric_values(s.values()), y))
                    }
                    ScoreKind::Crps => {
                        ElementScore::value(id, class, kernels::crps_sample(&numeric_values(s.values()), y))
                    }
                    _ if target.target_type() == TargetType::Binary => {
                        let p_true = s.values().iter().filter(|v| **v == Value::Bool(true)).count() as f64 / n;
                        ElementScore::value(id, class, kernels::brier_binary(p_true, *truth == Value::Bool(true)))
                    }
                    _ => {
                        let cats = target.bin_categories().unwrap_or_default();
                        match cats.iter().position(|c| c == truth) {
                            Some(k) => {
                                let freqs: Vec<f64> = cats
                                    .iter()
                                    .map(|c| s.values().iter().filter(|v| *v == c).count() as f64 / n)
                                    .collect();
                                ElementScore::value(id, class, kernels::brier(&freqs, k))
                            }
                            None => ElementScore::flagged(id, class, ScoreFlag::TruthOutOfRange),
                        }
                    }
                });
            }
            PredictionElement::Quantile(q) => {
                let intervals = q.central_intervals();
                if intervals.is_empty() {
                    out.push(ElementScore::flagged(id, class, ScoreFlag::NoIntervalPair));
                }
                for (alpha, lower, upper) in intervals {
                    let v = kernels::interval_score(numeric(lower), numeric(upper), y, alpha);
                    out.push(ElementScore::value(ScoreId::interval(alpha), class, v));
                }
            }
        }
    }
    out
}

/// Scores of a whole prediction: every applicable score id once, taken
/// from the element with the highest precedence that offers it.
pub fn score_prediction(
    prediction: &Prediction,
    target: &TargetDefinition,
    truth: &Value,
    kinds: &[ScoreKind],
) -> Vec<ElementScore> {
    let mut out: Vec<ElementScore> = Vec::new();
    for kind in ELEMENT_PRECEDENCE {
        let Some(element) = prediction.get(kind) else {
            continue;
        };
        for s in score_element(element, target, truth, kinds) {
            if !out.iter().any(|o| o.score == s.score) {
                out.push(s);
            }
        }
    }
    out.sort_by(|a, b| a.score.cmp(&b.score));
    out
}

/// Score kinds a prediction would produce, with the element supplying each.
fn planned_kinds(prediction: &Prediction, target_type: TargetType, kinds: &[ScoreKind]) -> Vec<(ScoreKind, ElementKind)> {
    let mut out: Vec<(ScoreKind, ElementKind)> = Vec::new();
    for class in ELEMENT_PRECEDENCE {
        if prediction.get(class).is_none() {
            continue;
        }
        for &k in applicable_scores(target_type, class) {
            if kinds.contains(&k) && !out.iter().any(|(o, _)| *o == k) {
                out.push((k, class));
            }
        }
    }
    out.sort();
    out
}

/// Scores one forecast against the project's truth. Predictions whose
/// truth is absent are reported as deferrals rather than records.
pub fn score_forecast(
    forecast: &Forecast,
    project: &ProjectConfig,
    truth: &TruthTable,
    kinds: &[ScoreKind],
) -> ScoreRun {
    let mut run = ScoreRun::default();
    for ((unit, target_name), prediction) in &forecast.predictions {
        let Some(target) = project.target(target_name) else {
            continue;
        };
        match truth.get(forecast.timezero, unit, target_name) {
            Some(observed) => {
                for s in score_prediction(prediction, target, observed, kinds) {
                    run.records.push(ScoreRecord {
                        model: forecast.model.clone(),
                        timezero: forecast.timezero,
                        unit: unit.clone(),
                        target: target_name.clone(),
                        score: s.score,
                        class: s.class,
                        value: s.value,
                        flag: s.flag,
                    });
                }
            }
            None => {
                for (score, class) in planned_kinds(prediction, target.target_type(), kinds) {
                    run.deferrals.push(Deferral {
                        model: forecast.model.clone(),
                        timezero: forecast.timezero,
                        unit: unit.clone(),
                        target: target_name.clone(),
                        score,
                        class,
                        flag: ScoreFlag::TruthMissing,
                    });
                }
            }
        }
    }
    run
}

/// Scores every forecast, returning records in canonical order.
pub fn score_project(project: &ProjectConfig, truth: &TruthTable, forecasts: &[Forecast]) -> ScoreRun {
    let mut run = ScoreRun::default();
    for f in forecasts {
        let r = score_forecast(f, project, truth, &ScoreKind::ALL);
        run.records.extend(r.records);
        run.deferrals.extend(r.deferrals);
    }
    run.records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    run
}

/// Writes score records as CSV with header
/// `model,timezero,unit,target,score,value,flag`.
pub fn write_scores_csv<'a>(records: impl IntoIterator<Item = &'a ScoreRecord>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SCORE_CSV_HEADER).expect("in-memory write");
    for r in records {
        w.write_record([
            r.model.clone(),
            r.timezero.format("%Y-%m-%d").to_string(),
            r.unit.clone(),
            r.target.clone(),
            r.score.to_string(),
            r.value.map(|v| v.to_string()).unwrap_or_default(),
            r.flag.map(|f| f.to_string()).unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}
