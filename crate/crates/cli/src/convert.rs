//! On-demand conversion of a forecast document to one representation.

use farc_core::conversion::{
    named_to_bin, named_to_quantile, named_to_sample, sample_to_bin, sample_to_quantile, to_point, PointMethod,
};
use farc_core::format::{ForecastDocument, Payload, PredictionRecord};
use farc_core::model::{ElementKind, Prediction, PredictionElement, TargetDefinition};
use farc_core::ProjectConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum Representation {
    Point(PointMethod),
    Bin,
    Sample { draws: usize, seed: u64 },
    Quantile(Vec<f64>),
}

#[cfg(test)]
impl Representation {
    pub fn kind(&self) -> ElementKind {
        match self {
            Representation::Point(_) => ElementKind::Point,
            Representation::Bin => ElementKind::Bin,
            Representation::Sample { .. } => ElementKind::Sample,
            Representation::Quantile(_) => ElementKind::Quantile,
        }
    }
}

fn convert(
    prediction: &Prediction,
    target: &TargetDefinition,
    to: &Representation,
    tolerance: f64,
) -> Result<PredictionElement, String> {
    let named = match prediction.get(ElementKind::Named) {
        Some(PredictionElement::Named(n)) => Some(n),
        _ => None,
    };
    let sample = match prediction.get(ElementKind::Sample) {
        Some(PredictionElement::Sample(s)) => Some(s),
        _ => None,
    };
    let err = |e: farc_core::conversion::ConversionError| e.to_string();
    match to {
        Representation::Point(method) => {
            if let Some(existing) = prediction.get(ElementKind::Point) {
                return Ok(existing.clone());
            }
            let source = [ElementKind::Named, ElementKind::Sample, ElementKind::Quantile, ElementKind::Bin]
                .into_iter()
                .find_map(|k| prediction.get(k))
                .ok_or("no element to summarise")?;
            to_point(source, *method, target).map(PredictionElement::Point).map_err(err)
        }
        Representation::Bin => match (named, sample) {
            (Some(n), _) => named_to_bin(n, target, tolerance).map(PredictionElement::Bin).map_err(err),
            (None, Some(s)) => sample_to_bin(s, target).map(PredictionElement::Bin).map_err(err),
            _ => prediction.get(ElementKind::Bin).cloned().ok_or_else(|| "needs a named or sample element".into()),
        },
        Representation::Sample { draws, seed } => match (named, sample) {
            (Some(n), _) => Ok(PredictionElement::Sample(named_to_sample(n, *draws, *seed))),
            (None, Some(s)) => Ok(PredictionElement::Sample(s.clone())),
            _ => Err("needs a named element".into()),
        },
        Representation::Quantile(levels) => match (named, sample) {
            (Some(n), _) => named_to_quantile(n, levels).map(PredictionElement::Quantile).map_err(err),
            (None, Some(s)) => sample_to_quantile(s, levels).map(PredictionElement::Quantile).map_err(err),
            _ => prediction
                .get(ElementKind::Quantile)
                .cloned()
                .ok_or_else(|| "needs a named or sample element".into()),
        },
    }
}

/// Converts every prediction of a validated forecast. Predictions that
/// cannot be converted are reported as `(unit, target, reason)`.
pub fn convert_forecast(
    predictions: &std::collections::BTreeMap<(String, String), Prediction>,
    config: &ProjectConfig,
    to: &Representation,
) -> (ForecastDocument, Vec<(String, String, String)>) {
    let mut doc = ForecastDocument::default();
    let mut skipped = Vec::new();
    for ((unit, target_name), prediction) in predictions {
        let Some(target) = config.target(target_name) else {
            continue;
        };
        match convert(prediction, target, to, config.bin_sum_tolerance) {
            Ok(element) => doc.predictions.push(PredictionRecord {
                unit: unit.clone(),
                target: target_name.clone(),
                payload: Payload::from_element(&element),
            }),
            Err(reason) => skipped.push((unit.clone(), target_name.clone(), reason)),
        }
    }
    (doc, skipped)
}
