//! Translations between element representations, and consistency checks
//! between elements that coexist in one prediction.
//!
//! Conversions run on demand only; uploads are stored as submitted.

use std::cmp::Ordering;

use thiserror::Error;

use crate::model::{
    days_to_date, BinElement, DataType, ElementKind, ModelError, NamedDistribution,
    Prediction, PredictionElement, QuantileElement, SampleElement, TargetDefinition, TargetType,
    Value, DEFAULT_BIN_SUM_TOLERANCE,
};

/// Levels used by [`check_consistency`].
pub const CONSISTENCY_LEVELS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConversionError {
    #[error("uncovered mass: categories leave {mass} of the probability outside every bin (tolerance {tolerance})")]
    UncoveredMass { mass: f64, tolerance: f64 },
    #[error("uncovered sample: value {0} falls outside every bin")]
    UncoveredSample(Value),
    #[error("target {0:?} declares no categories")]
    NoCategories(String),
    #[error("sample element has no values")]
    EmptySample,
    #[error("median requires a quantile at level 0.5")]
    MissingMedianLevel,
    #[error("the mean of a quantile element is not defined")]
    QuantileMean,
    #[error("the mean is not defined for {0} values")]
    NotNumeric(DataType),
    #[error("a point element has no distribution to summarise")]
    PointInput,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointMethod {
    Median,
    Mean,
}

impl PointMethod {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "median" => Some(PointMethod::Median),
            "mean" => Some(PointMethod::Mean),
            _ => None,
        }
    }
}

/// `P(X <= x)` for a named element.
pub fn named_cdf(named: &NamedDistribution<f64>, x: f64) -> f64 {
    named.cdf(x)
}

fn support_value(named: &NamedDistribution<f64>, x: f64) -> Value {
    if named.family().is_discrete() && x.is_finite() {
        Value::Int(x as i64)
    } else {
        Value::Float(x)
    }
}

/// Bins a named distribution over the target's categories.
///
/// Continuous categories are interval lower edges; discrete categories get
/// point masses. Mass outside the category span is dropped and the rest
/// renormalised, provided the dropped mass is within `tolerance`.
pub fn named_to_bin(
    named: &NamedDistribution<f64>,
    target: &TargetDefinition,
    tolerance: f64,
) -> Result<BinElement, ConversionError> {
    let cats = target
        .categories()
        .ok_or_else(|| ConversionError::NoCategories(target.name().to_string()))?;
    let probs: Vec<f64> = if target.target_type() == TargetType::Continuous {
        cats.iter()
            .enumerate()
            .map(|(k, c)| {
                let lo = c.to_f64().unwrap_or(f64::NAN);
                let hi = target.bin_upper_edge(k);
                let upper = if hi.is_finite() { named.cdf(hi) } else { 1.0 };
                (upper - named.cdf(lo)).max(0.0)
            })
            .collect()
    } else {
        cats.iter()
            .map(|c| {
                c.to_f64()
                    .map_or(0.0, |x| named.ln_density(x).exp())
            })
            .collect()
    };
    let covered: f64 = probs.iter().sum();
    let uncovered = (1.0 - covered).max(0.0);
    if uncovered > tolerance {
        return Err(ConversionError::UncoveredMass {
            mass: uncovered,
            tolerance,
        });
    }
    let entries = cats
        .iter()
        .cloned()
        .zip(probs.iter().map(|p| (p / covered).min(1.0)))
        .collect();
    Ok(BinElement::new(entries, tolerance)?)
}

/// `n` seeded draws by inverse-CDF transform. The same arguments give the
/// same sample on every platform.
pub fn named_to_sample(named: &NamedDistribution<f64>, n: usize, seed: u64) -> SampleElement {
    let values = named
        .draw(n.max(1), seed)
        .into_iter()
        .map(|x| support_value(named, x))
        .collect();
    SampleElement::new(values).expect("draws are finite and non-empty")
}

/// Inverse CDF at each level; for discrete families the smallest support
/// point whose CDF reaches the level.
pub fn named_to_quantile(
    named: &NamedDistribution<f64>,
    levels: &[f64],
) -> Result<QuantileElement, ConversionError> {
    let entries = levels
        .iter()
        .map(|&l| (l, support_value(named, named.quantile(l))))
        .collect();
    Ok(QuantileElement::new(entries)?)
}

/// Bin probabilities as sample frequencies over the target's bins.
pub fn sample_to_bin(
    sample: &SampleElement,
    target: &TargetDefinition,
) -> Result<BinElement, ConversionError> {
    let cats = target
        .bin_categories()
        .ok_or_else(|| ConversionError::NoCategories(target.name().to_string()))?;
    let mut counts = vec![0u64; cats.len()];
    for v in sample.values() {
        let k = target
            .bin_index(v)
            .ok_or_else(|| ConversionError::UncoveredSample(v.clone()))?;
        counts[k] += 1;
    }
    let n = sample.len() as f64;
    let entries = cats
        .iter()
        .cloned()
        .zip(counts.iter().map(|&c| c as f64 / n))
        .collect();
    Ok(BinElement::new(entries, DEFAULT_BIN_SUM_TOLERANCE)?)
}

/// 1-based rank of the type-1 empirical quantile: `ceil(p * n)`, clamped
/// to `1..=n`. Products within 1e-9 of an integer are treated as that
/// integer so that, e.g., `0.7 * 10` selects the 7th order statistic.
pub fn type1_rank(level: f64, n: usize) -> usize {
    let x = level * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    };
    (k as usize).clamp(1, n)
}

fn sorted_values(values: &[Value]) -> Vec<Value> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.compare(b).unwrap_or(Ordering::Equal));
    sorted
}

/// Type-1 empirical quantiles: the `ceil(p * n)`-th order statistic.
pub fn sample_to_quantile(
    sample: &SampleElement,
    levels: &[f64],
) -> Result<QuantileElement, ConversionError> {
    if sample.is_empty() {
        return Err(ConversionError::EmptySample);
    }
    let sorted = sorted_values(sample.values());
    let entries = levels
        .iter()
        .map(|&l| (l, sorted[type1_rank(l, sorted.len()) - 1].clone()))
        .collect();
    Ok(QuantileElement::new(entries)?)
}

/// Numeric mean of values, with dates averaged as day counts and rounded.
fn mean_value(pairs: impl Iterator<Item = (f64, Value)>, data_type: DataType) -> Result<Value, ConversionError> {
    match data_type {
        DataType::Float | DataType::Int | DataType::Date => {}
        other => return Err(ConversionError::NotNumeric(other)),
    }
    let mut total = 0.0;
    for (w, v) in pairs {
        total += w * v.to_f64().ok_or(ConversionError::NotNumeric(data_type))?;
    }
    Ok(match data_type {
        DataType::Date => Value::Date(
            days_to_date(total.round() as i64).ok_or(ConversionError::NotNumeric(data_type))?,
        ),
        _ => Value::Float(total),
    })
}

/// Point summary of a probabilistic element.
///
/// Median: inverse CDF at 0.5 (named), type-1 median (sample), the first
/// bin whose cumulative probability reaches 0.5 (bin; continuous bins are
/// represented by their lower edge), or the 0.5-level value (quantile).
/// Mean: analytic (named), arithmetic (sample) or probability-weighted
/// (bin). Dates average as day counts.
pub fn to_point(
    element: &PredictionElement,
    method: PointMethod,
    target: &TargetDefinition,
) -> Result<Value, ConversionError> {
    let data_type = target.data_type();
    match (element, method) {
        (PredictionElement::Point(_), _) => Err(ConversionError::PointInput),
        (PredictionElement::Named(n), PointMethod::Median) => Ok(support_value(n, n.quantile(0.5))),
        (PredictionElement::Named(n), PointMethod::Mean) => Ok(Value::Float(n.mean())),
        (PredictionElement::Sample(s), PointMethod::Median) => {
            let q = sample_to_quantile(s, &[0.5])?;
            Ok(q.entries()[0].1.clone())
        }
        (PredictionElement::Sample(s), PointMethod::Mean) => {
            let w = 1.0 / s.len() as f64;
            mean_value(s.values().iter().map(|v| (w, v.clone())), data_type)
        }
        (PredictionElement::Bin(b), PointMethod::Median) => {
            let cats = target
                .bin_categories()
                .ok_or_else(|| ConversionError::NoCategories(target.name().to_string()))?;
            let probs = b.probabilities_over(&cats);
            let mut acc = 0.0;
            for (c, p) in cats.iter().zip(&probs) {
                acc += p;
                if acc >= 0.5 - 1e-12 {
                    return Ok(c.clone());
                }
            }
            Ok(cats.last().cloned().expect("categories are non-empty"))
        }
        (PredictionElement::Bin(b), PointMethod::Mean) => mean_value(
            b.entries().iter().map(|(c, p)| (*p, c.clone())),
            data_type,
        ),
        (PredictionElement::Quantile(q), PointMethod::Median) => q
            .value_at(0.5)
            .cloned()
            .ok_or(ConversionError::MissingMedianLevel),
        (PredictionElement::Quantile(_), PointMethod::Mean) => Err(ConversionError::QuantileMean),
    }
}

/// Where two elements were compared.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Level(f64),
    Category(Value),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discrepancy {
    pub left: ElementKind,
    pub right: ElementKind,
    pub at: Checkpoint,
    pub left_value: f64,
    pub right_value: f64,
}

/// Decile-grid quantile of an element as a number (dates in days).
fn grid_quantile(element: &PredictionElement, level: f64, target: &TargetDefinition) -> Option<f64> {
    match element {
        PredictionElement::Point(v) => {
            if (level - 0.5).abs() < 1e-12 {
                v.to_f64()
            } else {
                None
            }
        }
        PredictionElement::Named(n) => Some(n.quantile(level)),
        PredictionElement::Sample(s) => {
            let sorted = sorted_values(s.values());
            sorted[type1_rank(level, sorted.len()) - 1].to_f64()
        }
        PredictionElement::Bin(b) => {
            let cats = target.bin_categories()?;
            let mut acc = 0.0;
            for (c, p) in cats.iter().zip(b.probabilities_over(&cats)) {
                acc += p;
                if acc >= level - 1e-12 {
                    return c.to_f64();
                }
            }
            cats.last()?.to_f64()
        }
        PredictionElement::Quantile(q) => q.value_at(level)?.to_f64(),
    }
}

fn category_probabilities(element: &PredictionElement, cats: &[Value]) -> Option<Vec<f64>> {
    match element {
        PredictionElement::Bin(b) => Some(b.probabilities_over(cats)),
        PredictionElement::Sample(s) => {
            let n = s.len() as f64;
            Some(
                cats.iter()
                    .map(|c| s.values().iter().filter(|v| *v == c).count() as f64 / n)
                    .collect(),
            )
        }
        _ => None,
    }
}

/// Compares every pair of coexisting elements. Numeric and date targets
/// are compared on the decile grid (a point only at the median); nominal
/// and binary targets by per-category probability.
pub fn check_consistency(
    prediction: &Prediction,
    target: &TargetDefinition,
    tolerance: f64,
) -> Vec<Discrepancy> {
    let elements: Vec<&PredictionElement> = prediction.elements().collect();
    let mut out = Vec::new();
    let categorical = matches!(
        target.target_type(),
        TargetType::Nominal | TargetType::Binary
    );
    for (i, a) in elements.iter().enumerate() {
        for b in &elements[i + 1..] {
            if categorical {
                let Some(cats) = target.bin_categories() else {
                    continue;
                };
                let (Some(pa), Some(pb)) = (
                    category_probabilities(a, &cats),
                    category_probabilities(b, &cats),
                ) else {
                    continue;
                };
                for ((c, x), y) in cats.iter().zip(pa).zip(pb) {
                    if (x - y).abs() > tolerance {
                        out.push(Discrepancy {
                            left: a.kind(),
                            right: b.kind(),
                            at: Checkpoint::Category(c.clone()),
                            left_value: x,
                            right_value: y,
                        });
                    }
                }
            } else {
                for &level in &CONSISTENCY_LEVELS {
                    let (Some(x), Some(y)) = (
                        grid_quantile(a, level, target),
                        grid_quantile(b, level, target),
                    ) else {
                        continue;
                    };
                    if (x - y).abs() > tolerance {
                        out.push(Discrepancy {
                            left: a.kind(),
                            right: b.kind(),
                            at: Checkpoint::Level(level),
                            left_value: x,
                            right_value: y,
                        });
                    }
                }
            }
        }
    }
    out
}
