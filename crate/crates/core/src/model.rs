//! Domain types of the prediction data model.

use std::borrow::Cow;
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Default tolerance on `|sum(p) - 1|` for bin elements.
pub const DEFAULT_BIN_SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("name must not be empty")]
    EmptyName,
    #[error("unit code must not be empty")]
    EmptyUnitCode,
    #[error("{what}: expected a {expected} value")]
    TypeMismatch { what: String, expected: DataType },
    #[error("range is not allowed for {0} targets")]
    RangeNotAllowed(TargetType),
    #[error("range lower bound must be strictly below the upper bound")]
    RangeOrder,
    #[error("categories are not allowed for {0} targets")]
    CategoriesNotAllowed(TargetType),
    #[error("{0} targets require a non-empty category list")]
    CategoriesRequired(TargetType),
    #[error("category {index} is not strictly increasing")]
    CategoriesNotIncreasing { index: usize },
    #[error("category {index} duplicates an earlier category")]
    DuplicateCategory { index: usize },
    #[error("category {index} lies outside the target range")]
    CategoryOutsideRange { index: usize },
    #[error("step-ahead targets require step_count")]
    MissingStepCount,
    #[error("value must be finite")]
    NonFinite,
    #[error("bin element has no entries")]
    EmptyBin,
    #[error("bin probability {index} is outside [0, 1]")]
    BinProbability { index: usize },
    #[error("bin category {index} is duplicated")]
    BinDuplicateCategory { index: usize },
    #[error("bin probabilities sum to {sum}, outside tolerance {tolerance}")]
    BinSum { sum: f64, tolerance: f64 },
    #[error("sample element has no values")]
    EmptySample,
    #[error("quantile element has no entries")]
    EmptyQuantile,
    #[error("quantile level {index} is not in the open interval (0, 1)")]
    QuantileLevelRange { index: usize },
    #[error("quantile level {index} is not strictly increasing")]
    QuantileLevelOrder { index: usize },
    #[error("quantile value {index} decreases as the level increases")]
    QuantileValueOrder { index: usize },
    #[error("{family}: {message}")]
    NamedParameter { family: Family, message: String },
    #[error("prediction already holds a {0} element")]
    DuplicateElement(ElementKind),
}

/// The five kinds of forecast target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetType {
    Continuous,
    Discrete,
    Nominal,
    Binary,
    Date,
}

impl TargetType {
    pub const ALL: [TargetType; 5] = [
        TargetType::Continuous,
        TargetType::Discrete,
        TargetType::Nominal,
        TargetType::Binary,
        TargetType::Date,
    ];

    pub fn data_type(self) -> DataType {
        match self {
            TargetType::Continuous => DataType::Float,
            TargetType::Discrete => DataType::Int,
            TargetType::Nominal => DataType::Text,
            TargetType::Binary => DataType::Bool,
            TargetType::Date => DataType::Date,
        }
    }

    /// Whether values of this type carry a natural order.
    pub fn is_ordered(self) -> bool {
        matches!(
            self,
            TargetType::Continuous | TargetType::Discrete | TargetType::Date
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TargetType::Continuous => "continuous",
            TargetType::Discrete => "discrete",
            TargetType::Nominal => "nominal",
            TargetType::Binary => "binary",
            TargetType::Date => "date",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for TargetType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Storage data type implied by a target type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    Float,
    Int,
    Text,
    Bool,
    Date,
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataType::Float => "float",
            DataType::Int => "int",
            DataType::Text => "text",
            DataType::Bool => "boolean",
            DataType::Date => "date",
        })
    }
}

/// Kind of prediction element. The declaration order is the canonical
/// ordering used for storage and export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Point,
    Named,
    Bin,
    Sample,
    Quantile,
}

impl ElementKind {
    pub const ALL: [ElementKind; 5] = [
        ElementKind::Point,
        ElementKind::Named,
        ElementKind::Bin,
        ElementKind::Sample,
        ElementKind::Quantile,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ElementKind::Point => "point",
            ElementKind::Named => "named",
            ElementKind::Bin => "bin",
            ElementKind::Sample => "sample",
            ElementKind::Quantile => "quantile",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Element kinds accepted for a target type.
pub fn element_kinds_for(target_type: TargetType) -> &'static [ElementKind] {
    use ElementKind::*;
    match target_type {
        TargetType::Continuous | TargetType::Discrete => &[Point, Named, Bin, Sample, Quantile],
        TargetType::Nominal | TargetType::Binary => &[Point, Bin, Sample],
        TargetType::Date => &[Point, Bin, Sample, Quantile],
    }
}

pub fn is_valid_element(target_type: TargetType, kind: ElementKind) -> bool {
    element_kinds_for(target_type).contains(&kind)
}

/// Distribution family of a named element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Norm,
    Lnorm,
    Gamma,
    Pois,
    Negbin,
    Binom,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Norm,
        Family::Lnorm,
        Family::Gamma,
        Family::Pois,
        Family::Negbin,
        Family::Binom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Norm => "norm",
            Family::Lnorm => "lnorm",
            Family::Gamma => "gamma",
            Family::Pois => "pois",
            Family::Negbin => "negbin",
            Family::Binom => "binom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.as_str() == s)
    }

    pub fn is_discrete(self) -> bool {
        matches!(self, Family::Pois | Family::Negbin | Family::Binom)
    }

    pub fn param_count(self) -> usize {
        match self {
            Family::Pois => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Named families accepted for a target type.
pub fn named_families_for(target_type: TargetType) -> &'static [Family] {
    match target_type {
        TargetType::Continuous => &[Family::Norm, Family::Lnorm, Family::Gamma],
        TargetType::Discrete => &[Family::Pois, Family::Negbin, Family::Binom],
        _ => &[],
    }
}

/// A scalar in one of the five target data types.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Float(f64),
    Int(i64),
    Text(String),
    Bool(bool),
    Date(NaiveDate),
}

/// Serialises as the natural JSON scalar; dates as ISO strings.
impl Serialize for Value {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Value::Float(x) => s.serialize_f64(*x),
            Value::Int(i) => s.serialize_i64(*i),
            Value::Text(t) => s.serialize_str(t),
            Value::Bool(b) => s.serialize_bool(*b),
            Value::Date(_) => s.serialize_str(&self.to_string()),
        }
    }
}

/// Days between 0001-01-01 and 1970-01-01 in the proleptic Gregorian calendar.
const UNIX_EPOCH_DAYS_FROM_CE: i64 = 719_163;

pub fn date_to_days(date: NaiveDate) -> i64 {
    i64::from(chrono::Datelike::num_days_from_ce(&date)) - UNIX_EPOCH_DAYS_FROM_CE
}

pub fn days_to_date(days: i64) -> Option<NaiveDate> {
    let from_ce = i32::try_from(days + UNIX_EPOCH_DAYS_FROM_CE).ok()?;
    NaiveDate::from_num_days_from_ce_opt(from_ce)
}

pub fn parse_iso_date(s: &str) -> Option<NaiveDate> {
    // chrono accepts unpadded fields; the wire format does not.
    let b = s.as_bytes();
    if b.len() != 10 || b[4] != b'-' || b[7] != b'-' {
        return None;
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok()
}

impl Value {
    pub fn data_type(&self) -> DataType {
        match self {
            Value::Float(_) => DataType::Float,
            Value::Int(_) => DataType::Int,
            Value::Text(_) => DataType::Text,
            Value::Bool(_) => DataType::Bool,
            Value::Date(_) => DataType::Date,
        }
    }

    /// Numeric image of the value: dates become day counts, booleans 0/1.
    pub fn to_f64(&self) -> Option<f64> {
        match self {
            Value::Float(x) => Some(*x),
            Value::Int(i) => Some(*i as f64),
            Value::Date(d) => Some(date_to_days(*d) as f64),
            Value::Bool(b) => Some(if *b { 1.0 } else { 0.0 }),
            Value::Text(_) => None,
        }
    }

    /// Orders two values of the same data type; `None` across types.
    pub fn compare(&self, other: &Value) -> Option<Ordering> {
        match (self, other) {
            (Value::Float(a), Value::Float(b)) => a.partial_cmp(b),
            (Value::Int(a), Value::Int(b)) => Some(a.cmp(b)),
            (Value::Text(a), Value::Text(b)) => Some(a.cmp(b)),
            (Value::Bool(a), Value::Bool(b)) => Some(a.cmp(b)),
            (Value::Date(a), Value::Date(b)) => Some(a.cmp(b)),
            _ => None,
        }
    }

    /// Parses text into the given data type, as used by truth files.
    pub fn parse_as(s: &str, data_type: DataType) -> Option<Value> {
        match data_type {
            DataType::Float => s
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .map(Value::Float),
            DataType::Int => s.trim().parse::<i64>().ok().map(Value::Int),
            DataType::Text => Some(Value::Text(s.to_string())),
            DataType::Bool => match s.trim().to_ascii_lowercase().as_str() {
                "true" => Some(Value::Bool(true)),
                "false" => Some(Value::Bool(false)),
                _ => None,
            },
            DataType::Date => parse_iso_date(s.trim()).map(Value::Date),
        }
    }

    /// Rebuilds a value of `data_type` from its numeric image.
    pub fn from_f64(x: f64, data_type: DataType) -> Option<Value> {
        if !x.is_finite() {
            return None;
        }
        match data_type {
            DataType::Float => Some(Value::Float(x)),
            DataType::Int => Some(Value::Int(x.round() as i64)),
            DataType::Date => days_to_date(x.round() as i64).map(Value::Date),
            DataType::Bool => Some(Value::Bool(x >= 0.5)),
            DataType::Text => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Float(x) => write!(f, "{x}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Text(s) => f.write_str(s),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Date(d) => write!(f, "{}", d.format("%Y-%m-%d")),
        }
    }
}

/// A named forecastable quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDefinition {
    name: String,
    target_type: TargetType,
    description: String,
    range: Option<(Value, Value)>,
    categories: Option<Vec<Value>>,
    is_step_ahead: bool,
    step_unit: Option<String>,
    step_count: Option<u32>,
}

/// Unvalidated parts of a [`TargetDefinition`].
#[derive(Debug, Clone, PartialEq)]
pub struct TargetParts {
    pub name: String,
    pub target_type: TargetType,
    pub description: String,
    pub range: Option<(Value, Value)>,
    pub categories: Option<Vec<Value>>,
    pub is_step_ahead: bool,
    pub step_unit: Option<String>,
    pub step_count: Option<u32>,
}

impl TargetParts {
    pub fn new(name: impl Into<String>, target_type: TargetType) -> Self {
        TargetParts {
            name: name.into(),
            target_type,
            description: String::new(),
            range: None,
            categories: None,
            is_step_ahead: false,
            step_unit: None,
            step_count: None,
        }
    }

    pub fn range(mut self, lower: Value, upper: Value) -> Self {
        self.range = Some((lower, upper));
        self
    }

    pub fn categories(mut self, cats: Vec<Value>) -> Self {
        self.categories = Some(cats);
        self
    }

    pub fn step_ahead(mut self, unit: impl Into<String>, count: u32) -> Self {
        self.is_step_ahead = true;
        self.step_unit = Some(unit.into());
        self.step_count = Some(count);
        self
    }

    pub fn description(mut self, text: impl Into<String>) -> Self {
        self.description = text.into();
        self
    }

    pub fn build(self) -> Result<TargetDefinition, ModelError> {
        TargetDefinition::new(self)
    }
}

impl TargetDefinition {
    pub fn new(parts: TargetParts) -> Result<Self, ModelError> {
        let TargetParts {
            name,
            target_type,
            description,
            range,
            categories,
            is_step_ahead,
            step_unit,
            step_count,
        } = parts;
        if name.trim().is_empty() {
            return Err(ModelError::EmptyName);
        }
        let data_type = target_type.data_type();
        let check_type = |v: &Value, what: String| -> Result<(), ModelError> {
            if v.data_type() != data_type {
                return Err(ModelError::TypeMismatch {
                    what,
                    expected: data_type,
                });
            }
            if let Value::Float(x) = v {
                if !x.is_finite() {
                    return Err(ModelError::NonFinite);
                }
            }
            Ok(())
        };

        if let Some((lo, hi)) = &range {
            if !target_type.is_ordered() {
                return Err(ModelError::RangeNotAllowed(target_type));
            }
            check_type(lo, "range lower bound".into())?;
            check_type(hi, "range upper bound".into())?;
            if lo.compare(hi) != Some(Ordering::Less) {
                return Err(ModelError::RangeOrder);
            }
        }

        match (&categories, target_type) {
            (Some(_), TargetType::Binary) => {
                return Err(ModelError::CategoriesNotAllowed(target_type));
            }
            (None, TargetType::Nominal) => {
                return Err(ModelError::CategoriesRequired(target_type));
            }
            (Some(c), _) if c.is_empty() => {
                return Err(ModelError::CategoriesRequired(target_type));
            }
            _ => {}
        }
        if let Some(cats) = &categories {
            for (i, c) in cats.iter().enumerate() {
                check_type(c, format!("category {i}"))?;
                if target_type.is_ordered() {
                    if i > 0 && cats[i - 1].compare(c) != Some(Ordering::Less) {
                        return Err(ModelError::CategoriesNotIncreasing { index: i });
                    }
                } else if cats[..i].contains(c) {
                    return Err(ModelError::DuplicateCategory { index: i });
                }
                if let Some((lo, hi)) = &range {
                    let below = c.compare(lo) == Some(Ordering::Less);
                    let above = c.compare(hi) == Some(Ordering::Greater);
                    if below || above {
                        return Err(ModelError::CategoryOutsideRange { index: i });
                    }
                }
            }
        }
        if is_step_ahead && step_count.is_none() {
            return Err(ModelError::MissingStepCount);
        }

        Ok(TargetDefinition {
            name,
            target_type,
            description,
            range,
            categories,
            is_step_ahead,
            step_unit,
            step_count,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn target_type(&self) -> TargetType {
        self.target_type
    }

    pub fn data_type(&self) -> DataType {
        self.target_type.data_type()
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn range(&self) -> Option<(&Value, &Value)> {
        self.range.as_ref().map(|(a, b)| (a, b))
    }

    /// Declared categories, exactly as configured.
    pub fn categories(&self) -> Option<&[Value]> {
        self.categories.as_deref()
    }

    pub fn is_step_ahead(&self) -> bool {
        self.is_step_ahead
    }

    pub fn step_unit(&self) -> Option<&str> {
        self.step_unit.as_deref()
    }

    pub fn step_count(&self) -> Option<u32> {
        self.step_count
    }

    /// Categories that bin predictions are expressed over. Binary targets
    /// always bin over `[false, true]`.
    pub fn bin_categories(&self) -> Option<Cow<'_, [Value]>> {
        if self.target_type == TargetType::Binary {
            return Some(Cow::Owned(vec![Value::Bool(false), Value::Bool(true)]));
        }
        self.categories.as_deref().map(Cow::Borrowed)
    }

    /// Whether `v` lies inside the declared range (always true without one).
    pub fn in_range(&self, v: &Value) -> bool {
        match &self.range {
            None => true,
            Some((lo, hi)) => {
                v.compare(lo) != Some(Ordering::Less) && v.compare(hi) != Some(Ordering::Greater)
            }
        }
    }

    /// Index of the bin that contains `v`.
    ///
    /// Continuous categories are left-inclusive lower edges: bin `k` covers
    /// `[c_k, c_{k+1})` and the last bin runs to the range upper bound
    /// (inclusive) or to infinity. All other types match by equality.
    pub fn bin_index(&self, v: &Value) -> Option<usize> {
        let cats = self.bin_categories()?;
        if self.target_type == TargetType::Continuous {
            let x = v.to_f64()?;
            let edges: Vec<f64> = cats.iter().filter_map(Value::to_f64).collect();
            if edges.is_empty() || x < edges[0] {
                return None;
            }
            if let Some((_, hi)) = &self.range {
                if x > hi.to_f64()? {
                    return None;
                }
            }
            let k = edges.partition_point(|&e| e <= x);
            Some(k - 1)
        } else {
            cats.iter().position(|c| c == v)
        }
    }

    /// Upper edge of continuous bin `k`: the next category, else the range
    /// upper bound, else infinity.
    pub fn bin_upper_edge(&self, k: usize) -> f64 {
        let cats = self.categories.as_deref().unwrap_or(&[]);
        if let Some(next) = cats.get(k + 1) {
            return next.to_f64().unwrap_or(f64::INFINITY);
        }
        self.range
            .as_ref()
            .and_then(|(_, hi)| hi.to_f64())
            .unwrap_or(f64::INFINITY)
    }

    /// Width used to weight bin `k` in the binned CRPS. Unit width for
    /// non-continuous targets; an unbounded final continuous bin borrows
    /// the width of its predecessor.
    pub fn bin_width(&self, k: usize) -> f64 {
        if self.target_type != TargetType::Continuous {
            return 1.0;
        }
        let cats = self.categories.as_deref().unwrap_or(&[]);
        let lower = cats.get(k).and_then(Value::to_f64).unwrap_or(0.0);
        let upper = self.bin_upper_edge(k);
        if upper.is_finite() {
            upper - lower
        } else if k > 0 {
            lower - cats[k - 1].to_f64().unwrap_or(lower)
        } else {
            1.0
        }
    }
}

/// Organisational or geographic entity that predictions apply to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unit {
    code: String,
    name: String,
}

impl Unit {
    pub fn new(code: impl Into<String>, name: impl Into<String>) -> Result<Self, ModelError> {
        let code = code.into();
        if code.trim().is_empty() {
            return Err(ModelError::EmptyUnitCode);
        }
        Ok(Unit {
            code,
            name: name.into(),
        })
    }

    pub fn code(&self) -> &str {
        &self.code
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeZero {
    pub date: NaiveDate,
    pub data_version_date: Option<NaiveDate>,
}

impl TimeZero {
    pub fn new(date: NaiveDate) -> Self {
        TimeZero {
            date,
            data_version_date: None,
        }
    }

    pub fn with_data_version(date: NaiveDate, version: NaiveDate) -> Self {
        TimeZero {
            date,
            data_version_date: Some(version),
        }
    }
}

/// A parametric predictive distribution.
///
/// Parameters follow the usual conventions: `norm(mean, sd)`,
/// `lnorm(meanlog, sdlog)`, `gamma(shape, rate)`, `pois(lambda)`,
/// `negbin(size, prob)` counting failures before `size` successes, and
/// `binom(size, prob)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NamedDistribution<T> {
    family: Family,
    param1: T,
    param2: Option<T>,
}

impl<T: Scalar> NamedDistribution<T> {
    pub fn new(family: Family, param1: T, param2: Option<T>) -> Result<Self, ModelError> {
        let bad = |message: &str| ModelError::NamedParameter {
            family,
            message: message.to_string(),
        };
        if !param1.is_finite() || param2.is_some_and(|p| !p.is_finite()) {
            return Err(bad("parameters must be finite"));
        }
        let second = match (family.param_count(), param2) {
            (1, None) => T::zero(),
            (1, Some(_)) => return Err(bad("takes exactly one parameter")),
            (_, Some(p)) => p,
            (_, None) => return Err(bad("takes two parameters")),
        };
        let zero = T::zero();
        let one = T::one();
        match family {
            Family::Norm if second <= zero => return Err(bad("sd must be > 0")),
            Family::Lnorm if second <= zero => return Err(bad("sdlog must be > 0")),
            Family::Gamma if param1 <= zero || second <= zero => {
                return Err(bad("shape and rate must be > 0"))
            }
            Family::Pois if param1 <= zero => return Err(bad("lambda must be > 0")),
            Family::Negbin if param1 <= zero => return Err(bad("size must be > 0")),
            Family::Negbin if second <= zero || second > one => {
                return Err(bad("prob must be in (0, 1]"))
            }
            Family::Binom if param1 < one || param1.fract() != zero => {
                return Err(bad("size must be an integer >= 1"))
            }
            Family::Binom if second < zero || second > one => {
                return Err(bad("prob must be in [0, 1]"))
            }
            _ => {}
        }
        Ok(NamedDistribution {
            family,
            param1,
            param2,
        })
    }

    pub fn norm(mean: T, sd: T) -> Result<Self, ModelError> {
        Self::new(Family::Norm, mean, Some(sd))
    }

    pub fn lnorm(meanlog: T, sdlog: T) -> Result<Self, ModelError> {
        Self::new(Family::Lnorm, meanlog, Some(sdlog))
    }

    pub fn gamma(shape: T, rate: T) -> Result<Self, ModelError> {
        Self::new(Family::Gamma, shape, Some(rate))
    }

    pub fn pois(lambda: T) -> Result<Self, ModelError> {
        Self::new(Family::Pois, lambda, None)
    }

    pub fn negbin(size: T, prob: T) -> Result<Self, ModelError> {
        Self::new(Family::Negbin, size, Some(prob))
    }

    pub fn binom(size: T, prob: T) -> Result<Self, ModelError> {
        Self::new(Family::Binom, size, Some(prob))
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn param1(&self) -> T {
        self.param1
    }

    pub fn param2(&self) -> Option<T> {
        self.param2
    }

    /// Second parameter, or zero for one-parameter families.
    pub(crate) fn p2(&self) -> T {
        self.param2.unwrap_or_else(T::zero)
    }
}

/// Probabilities over a set of categories.
#[derive(Debug, Clone, PartialEq)]
pub struct BinElement {
    entries: Vec<(Value, f64)>,
}

impl BinElement {
    /// Validates the structural invariants. A single `true` entry is the
    /// binary shorthand and is exempt from the sum check.
    pub fn new(entries: Vec<(Value, f64)>, tolerance: f64) -> Result<Self, ModelError> {
        if entries.is_empty() {
            return Err(ModelError::EmptyBin);
        }
        for (i, (cat, p)) in entries.iter().enumerate() {
            if !(0.0..=1.0).contains(p) {
                return Err(ModelError::BinProbability { index: i });
            }
            if matches!(cat, Value::Float(x) if !x.is_finite()) {
                return Err(ModelError::NonFinite);
            }
            if entries[..i].iter().any(|(c, _)| c == cat) {
                return Err(ModelError::BinDuplicateCategory { index: i });
            }
        }
        let binary_shorthand = entries.len() == 1 && entries[0].0 == Value::Bool(true);
        if !binary_shorthand {
            let sum: f64 = entries.iter().map(|(_, p)| p).sum();
            if (sum - 1.0).abs() > tolerance {
                return Err(ModelError::BinSum { sum, tolerance });
            }
        }
        Ok(BinElement { entries })
    }

    pub fn entries(&self) -> &[(Value, f64)] {
        &self.entries
    }

    /// Probability assigned to `category`. Categories absent from the
    /// element carry zero mass; the binary shorthand implies
    /// `P(false) = 1 - P(true)`.
    pub fn probability_of(&self, category: &Value) -> f64 {
        if let Some((_, p)) = self.entries.iter().find(|(c, _)| c == category) {
            return *p;
        }
        if *category == Value::Bool(false)
            && self.entries.len() == 1
            && self.entries[0].0 == Value::Bool(true)
        {
            return 1.0 - self.entries[0].1;
        }
        0.0
    }

    /// Probability vector aligned with `categories`.
    pub fn probabilities_over(&self, categories: &[Value]) -> Vec<f64> {
        categories.iter().map(|c| self.probability_of(c)).collect()
    }
}

/// Ordered draws from the predictive distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleElement {
    values: Vec<Value>,
}

impl SampleElement {
    pub fn new(values: Vec<Value>) -> Result<Self, ModelError> {
        if values.is_empty() {
            return Err(ModelError::EmptySample);
        }
        if values
            .iter()
            .any(|v| matches!(v, Value::Float(x) if !x.is_finite()))
        {
            return Err(ModelError::NonFinite);
        }
        Ok(SampleElement { values })
    }

    pub fn values(&self) -> &[Value] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Quantile levels in (0, 1) with non-decreasing values.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileElement {
    entries: Vec<(f64, Value)>,
}

impl QuantileElement {
    pub fn new(entries: Vec<(f64, Value)>) -> Result<Self, ModelError> {
        if entries.is_empty() {
            return Err(ModelError::EmptyQuantile);
        }
        for (i, (level, value)) in entries.iter().enumerate() {
            if !(*level > 0.0 && *level < 1.0) {
                return Err(ModelError::QuantileLevelRange { index: i });
            }
            if matches!(value, Value::Float(x) if !x.is_finite()) {
                return Err(ModelError::NonFinite);
            }
            if i > 0 {
                let (prev_level, prev_value) = &entries[i - 1];
                if *level <= *prev_level {
                    return Err(ModelError::QuantileLevelOrder { index: i });
                }
                if value.compare(prev_value) == Some(Ordering::Less) {
                    return Err(ModelError::QuantileValueOrder { index: i });
                }
            }
        }
        Ok(QuantileElement { entries })
    }

    pub fn entries(&self) -> &[(f64, Value)] {
        &self.entries
    }

    /// Value at `level`, matching levels within 1e-9.
    pub fn value_at(&self, level: f64) -> Option<&Value> {
        self.entries
            .iter()
            .find(|(l, _)| (l - level).abs() <= 1e-9)
            .map(|(_, v)| v)
    }

    /// Central intervals available in the element: `(alpha, lower, upper)`
    /// for every level `a < 0.5` whose mirror `1 - a` is also present.
    pub fn central_intervals(&self) -> Vec<(f64, &Value, &Value)> {
        self.entries
            .iter()
            .filter(|(l, _)| *l < 0.5)
            .filter_map(|(l, lower)| self.value_at(1.0 - l).map(|upper| (2.0 * l, lower, upper)))
            .collect()
    }
}

/// One quantitative representation of a prediction.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictionElement {
    Point(Value),
    Named(NamedDistribution<f64>),
    Bin(BinElement),
    Sample(SampleElement),
    Quantile(QuantileElement),
}

impl PredictionElement {
    pub fn kind(&self) -> ElementKind {
        match self {
            PredictionElement::Point(_) => ElementKind::Point,
            PredictionElement::Named(_) => ElementKind::Named,
            PredictionElement::Bin(_) => ElementKind::Bin,
            PredictionElement::Sample(_) => ElementKind::Sample,
            PredictionElement::Quantile(_) => ElementKind::Quantile,
        }
    }
}

/// All elements for one (unit, target), at most one per kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Prediction {
    elements: BTreeMap<ElementKind, PredictionElement>,
}

impl Prediction {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, element: PredictionElement) -> Result<(), ModelError> {
        let kind = element.kind();
        if self.elements.contains_key(&kind) {
            return Err(ModelError::DuplicateElement(kind));
        }
        self.elements.insert(kind, element);
        Ok(())
    }

    pub fn get(&self, kind: ElementKind) -> Option<&PredictionElement> {
        self.elements.get(&kind)
    }

    pub fn elements(&self) -> impl Iterator<Item = &PredictionElement> {
        self.elements.values()
    }

    pub fn kinds(&self) -> impl Iterator<Item = ElementKind> + '_ {
        self.elements.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

/// Key of a prediction inside a forecast: (unit code, target name).
pub type PredictionKey = (String, String);

/// Every prediction one model made for one time-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub model: String,
    pub timezero: NaiveDate,
    pub issued_at: DateTime<Utc>,
    pub source: Option<String>,
    pub predictions: BTreeMap<PredictionKey, Prediction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    #[default]
    Public,
    Private,
}

impl Visibility {
    pub fn as_str(self) -> &'static str {
        match self {
            Visibility::Public => "public",
            Visibility::Private => "private",
        }
    }
}

/// Metadata of a forecasting model within a project.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub name: String,
    pub abbreviation: String,
    #[serde(default)]
    pub team: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub owners: Vec<String>,
}
