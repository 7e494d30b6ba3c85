//! Upload-time rule catalog.
//!
//! Every forecast is checked against its project before storage. All
//! violations are collected in one pass; errors block storage, warnings do
//! not. Rule ids are stable across releases.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::Serialize;

use crate::format::{ForecastDocument, Payload, PredictionRecord, ProjectConfig, TruthTable, WireValue};
use crate::model::{
    is_valid_element, named_families_for, BinElement, ElementKind, ModelError, NamedDistribution,
    Prediction, PredictionElement, PredictionKey, QuantileElement, SampleElement,
    TargetDefinition, TargetType, Value,
};

/// Version of the published rule catalog. Bumped whenever a rule is added
/// or its meaning changes; ids are never reused.
pub const RULE_CATALOG_VERSION: &str = "1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Error => "error",
            Severity::Warning => "warning",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    UnknownUnit,
    UnknownTarget,
    Matrix,
    DuplicateRecord,
    TypeMismatch,
    Range,
    BinProbability,
    BinSum,
    CategoryUnknown,
    BinCategoryDuplicate,
    BinaryCategory,
    QuantileLevel,
    QuantileMonotone,
    NamedFamily,
    NamedParameter,
    SampleEmpty,
    MissingPayload,
    QuantileNoPair,
    TruthRange,
    TruthCategory,
}

impl Rule {
    pub const ALL: [Rule; 20] = [
        Rule::UnknownUnit,
        Rule::UnknownTarget,
        Rule::Matrix,
        Rule::DuplicateRecord,
        Rule::TypeMismatch,
        Rule::Range,
        Rule::BinProbability,
        Rule::BinSum,
        Rule::CategoryUnknown,
        Rule::BinCategoryDuplicate,
        Rule::BinaryCategory,
        Rule::QuantileLevel,
        Rule::QuantileMonotone,
        Rule::NamedFamily,
        Rule::NamedParameter,
        Rule::SampleEmpty,
        Rule::MissingPayload,
        Rule::QuantileNoPair,
        Rule::TruthRange,
        Rule::TruthCategory,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Rule::UnknownUnit => "UNKNOWN-UNIT-001",
            Rule::UnknownTarget => "UNKNOWN-TARGET-001",
            Rule::Matrix => "MATRIX-001",
            Rule::DuplicateRecord => "DUP-RECORD-001",
            Rule::TypeMismatch => "TYPE-MISMATCH-001",
            Rule::Range => "RANGE-001",
            Rule::BinProbability => "BIN-PROB-001",
            Rule::BinSum => "BIN-SUM-001",
            Rule::CategoryUnknown => "CAT-UNKNOWN-001",
            Rule::BinCategoryDuplicate => "BIN-CAT-DUP-001",
            Rule::BinaryCategory => "BINARY-CAT-001",
            Rule::QuantileLevel => "QUANTILE-LEVEL-001",
            Rule::QuantileMonotone => "QUANTILE-MONOTONE-001",
            Rule::NamedFamily => "NAMED-FAMILY-001",
            Rule::NamedParameter => "NAMED-PARAM-001",
            Rule::SampleEmpty => "SAMPLE-EMPTY-001",
            Rule::MissingPayload => "MISSING-PAYLOAD-001",
            Rule::QuantileNoPair => "QUANTILE-NO-PAIR-001",
            Rule::TruthRange => "RANGE-002",
            Rule::TruthCategory => "CAT-UNKNOWN-002",
        }
    }

    pub fn severity(self) -> Severity {
        match self {
            Rule::QuantileNoPair | Rule::TruthRange | Rule::TruthCategory => Severity::Warning,
            _ => Severity::Error,
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Rule::UnknownUnit => "record names a unit the project does not define",
            Rule::UnknownTarget => "record names a target the project does not define",
            Rule::Matrix => "element kind is not allowed for the target type",
            Rule::DuplicateRecord => "the same (unit, target, class) appears more than once",
            Rule::TypeMismatch => "value does not have the target's data type",
            Rule::Range => "point, sample, quantile or bin-category value outside the target range",
            Rule::BinProbability => "bin probability outside [0, 1]",
            Rule::BinSum => "bin probabilities do not sum to 1 within the project tolerance",
            Rule::CategoryUnknown => "bin category or nominal value not in the declared categories",
            Rule::BinCategoryDuplicate => "bin category listed twice",
            Rule::BinaryCategory => "binary bin category other than true/false",
            Rule::QuantileLevel => "quantile levels outside (0, 1) or not strictly increasing",
            Rule::QuantileMonotone => "quantile values decrease as the level increases",
            Rule::NamedFamily => "named family not allowed for the target type",
            Rule::NamedParameter => "named distribution parameters violate the family constraints",
            Rule::SampleEmpty => "sample element has no values",
            Rule::MissingPayload => "bin or quantile element has no entries",
            Rule::QuantileNoPair => "no symmetric level pair, so interval scores cannot be computed",
            Rule::TruthRange => "observed value outside the target range",
            Rule::TruthCategory => "observed value outside the declared categories",
        }
    }

    pub fn from_id(id: &str) -> Option<Rule> {
        Rule::ALL.into_iter().find(|r| r.id() == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RuleViolation {
    pub rule_id: &'static str,
    pub severity: Severity,
    pub unit: Option<String>,
    pub target: Option<String>,
    pub class: Option<ElementKind>,
    pub message: String,
}

impl RuleViolation {
    fn new(rule: Rule, record: Option<(&str, &str, ElementKind)>, message: String) -> Self {
        RuleViolation {
            rule_id: rule.id(),
            severity: rule.severity(),
            unit: record.map(|r| r.0.to_string()),
            target: record.map(|r| r.1.to_string()),
            class: record.map(|r| r.2),
            message,
        }
    }

    pub fn rule(&self) -> Option<Rule> {
        Rule::from_id(self.rule_id)
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for RuleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.severity, self.rule_id)?;
        if let (Some(u), Some(t)) = (&self.unit, &self.target) {
            write!(f, " [{u} / {t}")?;
            if let Some(c) = self.class {
                write!(f, " / {c}")?;
            }
            write!(f, "]")?;
        }
        write!(f, ": {}", self.message)
    }
}

pub fn error_count(violations: &[RuleViolation]) -> usize {
    violations.iter().filter(|v| v.is_error()).count()
}

/// The published catalog as JSON-ready rows.
pub fn catalog() -> Vec<CatalogEntry> {
    Rule::ALL
        .into_iter()
        .map(|r| CatalogEntry {
            rule_id: r.id(),
            severity: r.severity(),
            description: r.description(),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CatalogEntry {
    pub rule_id: &'static str,
    pub severity: Severity,
    pub description: &'static str,
}

/// A forecast that passed validation, converted to typed predictions,
/// along with any warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct Validated {
    pub predictions: BTreeMap<PredictionKey, Prediction>,
    pub warnings: Vec<RuleViolation>,
}

/// Checks a forecast and returns every violation, in document order.
/// An empty list means the forecast is storable.
pub fn validate_forecast(doc: &ForecastDocument, project: &ProjectConfig) -> Vec<RuleViolation> {
    check(doc, project).0
}

/// Validates and, when no error-level rule fires, builds the typed
/// predictions. On failure returns the full violation list.
pub fn check_forecast(
    doc: &ForecastDocument,
    project: &ProjectConfig,
) -> Result<Validated, Vec<RuleViolation>> {
    let (violations, elements) = check(doc, project);
    if error_count(&violations) > 0 {
        return Err(violations);
    }
    let mut predictions: BTreeMap<PredictionKey, Prediction> = BTreeMap::new();
    for ((unit, target), element) in elements {
        predictions
            .entry((unit, target))
            .or_default()
            .insert(element)
            .expect("duplicate records are rejected by DUP-RECORD");
    }
    Ok(Validated {
        predictions,
        warnings: violations,
    })
}

type Built = Vec<(PredictionKey, PredictionElement)>;

fn check(doc: &ForecastDocument, project: &ProjectConfig) -> (Vec<RuleViolation>, Built) {
    let mut out = Vec::new();
    let mut built = Vec::new();
    let mut seen: HashMap<(&str, &str, ElementKind), usize> = HashMap::new();
    for record in &doc.predictions {
        let kind = record.payload.kind();
        let key = (record.unit.as_str(), record.target.as_str(), kind);
        let count = seen.entry(key).or_insert(0);
        *count += 1;
        if *count == 2 {
            out.push(RuleViolation::new(
                Rule::DuplicateRecord,
                Some(key),
                format!("more than one {kind} record for this unit and target"),
            ));
        }
        let mut ctx = RecordCheck {
            key,
            out: &mut out,
            failed: false,
        };
        if let Some(element) = ctx.record(record, project) {
            if !ctx.failed {
                built.push(((record.unit.clone(), record.target.clone()), element));
            }
        }
    }
    (out, built)
}

struct RecordCheck<'a, 'o> {
    key: (&'a str, &'a str, ElementKind),
    out: &'o mut Vec<RuleViolation>,
    failed: bool,
}

impl<'a, 'o> RecordCheck<'a, 'o> {
    fn push(&mut self, rule: Rule, message: String) {
        if rule.severity() == Severity::Error {
            self.failed = true;
        }
        self.out
            .push(RuleViolation::new(rule, Some(self.key), message));
    }

    fn record(&mut self, record: &PredictionRecord, project: &ProjectConfig) -> Option<PredictionElement> {
        let unit_known = project.unit(&record.unit).is_some();
        if !unit_known {
            self.push(Rule::UnknownUnit, format!("unknown unit {:?}", record.unit));
        }
        let Some(target) = project.target(&record.target) else {
            self.push(Rule::UnknownTarget, format!("unknown target {:?}", record.target));
            return None;
        };
        let kind = record.payload.kind();
        if !is_valid_element(target.target_type(), kind) {
            self.push(
                Rule::Matrix,
                format!(
                    "{kind} predictions are not allowed for {} targets",
                    target.target_type()
                ),
            );
            return None;
        }
        let element = match &record.payload {
            Payload::Point { value } => self.point(target, value),
            Payload::Named {
                family,
                param1,
                param2,
            } => self.named(target, *family, *param1, *param2),
            Payload::Bin { cat, prob } => self.bin(target, cat, prob, project.bin_sum_tolerance),
            Payload::Sample { sample } => self.sample(target, sample),
            Payload::Quantile { quantile, value } => self.quantile(target, quantile, value),
        };
        if unit_known {
            element
        } else {
            None
        }
    }

    /// Coerces a value and checks range and nominal membership.
    fn value(&mut self, target: &TargetDefinition, w: &WireValue, what: &str) -> Option<Value> {
        let Some(v) = w.coerce(target.data_type()) else {
            self.push(
                Rule::TypeMismatch,
                format!(
                    "{what} {w} ({}) is not a {} value for a {} target",
                    w.type_name(),
                    target.data_type(),
                    target.target_type()
                ),
            );
            return None;
        };
        if !target.in_range(&v) {
            let (lo, hi) = target.range().expect("in_range is true without a range");
            self.push(
                Rule::Range,
                format!("{what} {v} lies outside the target range [{lo}, {hi}]"),
            );
        }
        if target.target_type() == TargetType::Nominal
            && !target.categories().unwrap_or(&[]).contains(&v)
        {
            self.push(
                Rule::CategoryUnknown,
                format!("{what} {v} is not one of the declared categories"),
            );
        }
        Some(v)
    }

    fn point(&mut self, target: &TargetDefinition, value: &WireValue) -> Option<PredictionElement> {
        self.value(target, value, "point value")
            .map(PredictionElement::Point)
    }

    fn named(
        &mut self,
        target: &TargetDefinition,
        family: crate::model::Family,
        param1: f64,
        param2: Option<f64>,
    ) -> Option<PredictionElement> {
        if !named_families_for(target.target_type()).contains(&family) {
            self.push(
                Rule::NamedFamily,
                format!(
                    "family {family} is not allowed for {} targets",
                    target.target_type()
                ),
            );
            return None;
        }
        match NamedDistribution::new(family, param1, param2) {
            Ok(n) => Some(PredictionElement::Named(n)),
            Err(e) => {
                self.push(Rule::NamedParameter, e.to_string());
                None
            }
        }
    }

    fn bin(
        &mut self,
        target: &TargetDefinition,
        cats: &[WireValue],
        probs: &[f64],
        tolerance: f64,
    ) -> Option<PredictionElement> {
        if cats.is_empty() {
            self.push(Rule::MissingPayload, "bin element has no entries".into());
            return None;
        }
        let binary = target.target_type() == TargetType::Binary;
        let declared = target.bin_categories();
        let mut entries = Vec::with_capacity(cats.len());
        for (i, (w, &p)) in cats.iter().zip(probs).enumerate() {
            if !(0.0..=1.0).contains(&p) {
                self.push(
                    Rule::BinProbability,
                    format!("probability {p} for bin {i} is outside [0, 1]"),
                );
            }
            let v = if binary {
                match w {
                    WireValue::Bool(b) => Value::Bool(*b),
                    other => {
                        self.push(
                            Rule::BinaryCategory,
                            format!("binary bin category {other} must be true or false"),
                        );
                        continue;
                    }
                }
            } else {
                let Some(v) = w.coerce(target.data_type()) else {
                    self.push(
                        Rule::TypeMismatch,
                        format!(
                            "bin category {w} ({}) is not a {} value for a {} target",
                            w.type_name(),
                            target.data_type(),
                            target.target_type()
                        ),
                    );
                    continue;
                };
                if !target.in_range(&v) {
                    self.push(Rule::Range, format!("bin category {v} lies outside the target range"));
                }
                match &declared {
                    Some(d) if d.contains(&v) => {}
                    Some(_) => self.push(
                        Rule::CategoryUnknown,
                        format!("bin category {v} is not one of the declared categories"),
                    ),
                    None => self.push(
                        Rule::CategoryUnknown,
                        format!("bin category {v}: the target declares no categories"),
                    ),
                }
                v
            };
            if entries.iter().any(|(c, _)| *c == v) {
                self.push(Rule::BinCategoryDuplicate, format!("bin category {v} is listed twice"));
            }
            entries.push((v, p));
        }
        let shorthand = binary && cats.len() == 1 && cats[0] == WireValue::Bool(true);
        let sum: f64 = probs.iter().sum();
        if !shorthand && (sum - 1.0).abs() > tolerance {
            self.push(
                Rule::BinSum,
                format!("bin probabilities sum to {sum}, outside 1 ± {tolerance}"),
            );
        }
        if self.failed {
            return None;
        }
        self.build(BinElement::new(entries, tolerance).map(PredictionElement::Bin))
    }

    fn sample(&mut self, target: &TargetDefinition, sample: &[WireValue]) -> Option<PredictionElement> {
        if sample.is_empty() {
            self.push(Rule::SampleEmpty, "sample element has no values".into());
            return None;
        }
        let values: Vec<Value> = sample
            .iter()
            .filter_map(|w| self.value(target, w, "sample value"))
            .collect();
        if self.failed {
            return None;
        }
        self.build(SampleElement::new(values).map(PredictionElement::Sample))
    }

    fn quantile(
        &mut self,
        target: &TargetDefinition,
        levels: &[f64],
        values: &[WireValue],
    ) -> Option<PredictionElement> {
        if levels.is_empty() {
            self.push(Rule::MissingPayload, "quantile element has no entries".into());
            return None;
        }
        for (i, &l) in levels.iter().enumerate() {
            if !(l > 0.0 && l < 1.0) {
                self.push(
                    Rule::QuantileLevel,
                    format!("quantile level {l} is not in the open interval (0, 1)"),
                );
            } else if i > 0 && l <= levels[i - 1] {
                self.push(
                    Rule::QuantileLevel,
                    format!("quantile level {l} does not exceed the previous level {}", levels[i - 1]),
                );
            }
        }
        let typed: Vec<Option<Value>> = values
            .iter()
            .map(|w| self.value(target, w, "quantile value"))
            .collect();
        for i in 1..typed.len() {
            if let (Some(prev), Some(cur)) = (&typed[i - 1], &typed[i]) {
                if cur.compare(prev) == Some(std::cmp::Ordering::Less) {
                    self.push(
                        Rule::QuantileMonotone,
                        format!(
                            "value {cur} at level {} is below value {prev} at level {}",
                            levels[i],
                            levels[i - 1]
                        ),
                    );
                }
            }
        }
        if self.failed {
            return None;
        }
        let entries: Vec<(f64, Value)> = levels
            .iter()
            .copied()
            .zip(typed.into_iter().map(|v| v.expect("no type errors")))
            .collect();
        let element = self.build(QuantileElement::new(entries).map(PredictionElement::Quantile));
        if let Some(PredictionElement::Quantile(q)) = &element {
            if q.central_intervals().is_empty() {
                self.push(
                    Rule::QuantileNoPair,
                    "no level pair (a, 1 - a); interval scores will not be computed".into(),
                );
            }
        }
        element
    }

    /// Model constructors re-check invariants the rules above already
    /// cover; a failure here maps back onto the matching rule.
    fn build(&mut self, result: Result<PredictionElement, ModelError>) -> Option<PredictionElement> {
        match result {
            Ok(e) => Some(e),
            Err(e) => {
                let rule = match e {
                    ModelError::EmptyBin | ModelError::EmptyQuantile => Rule::MissingPayload,
                    ModelError::EmptySample => Rule::SampleEmpty,
                    ModelError::BinProbability { .. } => Rule::BinProbability,
                    ModelError::BinSum { .. } => Rule::BinSum,
                    ModelError::BinDuplicateCategory { .. } => Rule::BinCategoryDuplicate,
                    ModelError::QuantileLevelRange { .. } | ModelError::QuantileLevelOrder { .. } => {
                        Rule::QuantileLevel
                    }
                    ModelError::QuantileValueOrder { .. } => Rule::QuantileMonotone,
                    ModelError::NamedParameter { .. } => Rule::NamedParameter,
                    _ => Rule::TypeMismatch,
                };
                self.push(rule, e.to_string());
                None
            }
        }
    }
}

/// Flags observed values outside their target's range or categories.
/// All findings are warnings; the truth is still stored.
pub fn validate_truth(truth: &TruthTable, project: &ProjectConfig) -> Vec<RuleViolation> {
    let mut out = Vec::new();
    for row in truth.rows() {
        let Some(target) = project.target(&row.target) else {
            continue;
        };
        let loc = Some((row.unit.as_str(), row.target.as_str(), ElementKind::Point));
        let mut push = |rule: Rule, message: String| {
            let mut v = RuleViolation::new(rule, loc, message);
            v.class = None;
            out.push(v);
        };
        if !target.in_range(&row.value) {
            let (lo, hi) = target.range().expect("in_range is true without a range");
            push(
                Rule::TruthRange,
                format!(
                    "observed {} at {} lies outside the target range [{lo}, {hi}]",
                    row.value, row.timezero
                ),
            );
        }
        let outside = match target.target_type() {
            TargetType::Binary => false,
            TargetType::Nominal | TargetType::Date | TargetType::Discrete => target
                .categories()
                .is_some_and(|c| !c.contains(&row.value)),
            TargetType::Continuous => {
                target.categories().is_some() && target.bin_index(&row.value).is_none()
            }
        };
        if outside {
            push(
                Rule::TruthCategory,
                format!(
                    "observed {} at {} is not covered by the declared categories",
                    row.value, row.timezero
                ),
            );
        }
    }
    out
}
