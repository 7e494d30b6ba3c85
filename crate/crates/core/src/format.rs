//! Wire formats: forecast JSON, upload envelope, truth CSV and project
//! configuration JSON.
//!
//! Forecast documents hold one record per (unit, target, class):
//!
//! ```json
//! {"predictions": [
//!   {"unit": "US", "target": "wk1", "class": "point",    "prediction": {"value": 55}},
//!   {"unit": "US", "target": "wk1", "class": "named",    "prediction": {"family": "norm", "param1": 50, "param2": 5}},
//!   {"unit": "US", "target": "wk1", "class": "bin",      "prediction": {"cat": [0, 10], "prob": [0.4, 0.6]}},
//!   {"unit": "US", "target": "wk1", "class": "sample",   "prediction": {"sample": [3, 1, 2]}},
//!   {"unit": "US", "target": "wk1", "class": "quantile", "prediction": {"quantile": [0.25, 0.75], "value": [40, 60]}}
//! ]}
//! ```
//!
//! Parsing is strict: unknown keys are rejected and every problem found is
//! reported with a machine-readable code and a location.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::{Map, Value as Json};
use thiserror::Error;

use crate::model::{
    parse_iso_date, DataType, ElementKind, Family, Forecast, PredictionElement,
    TargetDefinition, TargetParts, TargetType, TimeZero, Unit, Value, Visibility,
    DEFAULT_BIN_SUM_TOLERANCE,
};

/// Largest accepted upload, in bytes.
pub const MAX_DOCUMENT_BYTES: usize = 256 * 1024 * 1024;

pub const TRUTH_HEADER: [&str; 4] = ["timezero", "unit", "target", "value"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCode {
    TooLarge,
    NotUtf8,
    MalformedJson,
    NotAnObject,
    MissingKey,
    UnknownKey,
    UnknownClass,
    UnknownFamily,
    ShapeMismatch,
    LengthMismatch,
    BadDate,
    BadHeader,
    MalformedCsv,
    DuplicateTruthRow,
    TypeMismatch,
    DuplicateUnit,
    DuplicateTarget,
    DuplicateTimezero,
    DuplicateDataVersion,
    UnknownTargetType,
    CategoryTypeMismatch,
    RangeTypeMismatch,
    InvalidTarget,
    InvalidUnit,
    InvalidTolerance,
    UnknownReference,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::TooLarge => "too-large",
            ErrorCode::NotUtf8 => "not-utf8",
            ErrorCode::MalformedJson => "malformed-json",
            ErrorCode::NotAnObject => "not-an-object",
            ErrorCode::MissingKey => "missing-key",
            ErrorCode::UnknownKey => "unknown-key",
            ErrorCode::UnknownClass => "unknown-class",
            ErrorCode::UnknownFamily => "unknown-family",
            ErrorCode::ShapeMismatch => "shape-mismatch",
            ErrorCode::LengthMismatch => "length-mismatch",
            ErrorCode::BadDate => "bad-date",
            ErrorCode::BadHeader => "bad-header",
            ErrorCode::MalformedCsv => "malformed-csv",
            ErrorCode::DuplicateTruthRow => "duplicate-truth-row",
            ErrorCode::TypeMismatch => "type-mismatch",
            ErrorCode::DuplicateUnit => "duplicate-unit",
            ErrorCode::DuplicateTarget => "duplicate-target",
            ErrorCode::DuplicateTimezero => "duplicate-timezero",
            ErrorCode::DuplicateDataVersion => "duplicate-data-version",
            ErrorCode::UnknownTargetType => "unknown-target-type",
            ErrorCode::CategoryTypeMismatch => "category-type-mismatch",
            ErrorCode::RangeTypeMismatch => "range-type-mismatch",
            ErrorCode::InvalidTarget => "invalid-target",
            ErrorCode::InvalidUnit => "invalid-unit",
            ErrorCode::InvalidTolerance => "invalid-tolerance",
            ErrorCode::UnknownReference => "unknown-reference",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One parse problem: code, location (JSON path, `line:column`, or CSV
/// `line N`) and message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub code: ErrorCode,
    pub location: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(code: ErrorCode, location: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic {
            code,
            location: location.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.code, self.location, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{}", render(.diagnostics))]
pub struct FormatError {
    pub diagnostics: Vec<Diagnostic>,
}

fn render(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl FormatError {
    fn single(code: ErrorCode, location: impl Into<String>, message: impl Into<String>) -> Self {
        FormatError {
            diagnostics: vec![Diagnostic::new(code, location, message)],
        }
    }

    pub fn has_code(&self, code: ErrorCode) -> bool {
        self.diagnostics.iter().any(|d| d.code == code)
    }
}

/// An untyped scalar as it appears on the wire. Types are resolved against
/// the target definition during validation.
#[derive(Debug, Clone, PartialEq)]
pub enum WireValue {
    Int(i64),
    Float(f64),
    Text(String),
    Bool(bool),
}

impl WireValue {
    fn from_json(v: &Json) -> Option<WireValue> {
        match v {
            Json::Number(n) => Some(match n.as_i64() {
                Some(i) => WireValue::Int(i),
                None => WireValue::Float(n.as_f64()?),
            }),
            Json::String(s) => Some(WireValue::Text(s.clone())),
            Json::Bool(b) => Some(WireValue::Bool(*b)),
            _ => None,
        }
    }

    /// Resolves the value in a target data type. Integers widen to floats;
    /// dates must be ISO `YYYY-MM-DD` strings; nothing else converts.
    pub fn coerce(&self, data_type: DataType) -> Option<Value> {
        match (self, data_type) {
            (WireValue::Float(x), DataType::Float) => Some(Value::Float(*x)),
            (WireValue::Int(i), DataType::Float) => Some(Value::Float(*i as f64)),
            (WireValue::Int(i), DataType::Int) => Some(Value::Int(*i)),
            (WireValue::Text(s), DataType::Text) => Some(Value::Text(s.clone())),
            (WireValue::Text(s), DataType::Date) => parse_iso_date(s).map(Value::Date),
            (WireValue::Bool(b), DataType::Bool) => Some(Value::Bool(*b)),
            _ => None,
        }
    }

    /// JSON type name, for messages.
    pub fn type_name(&self) -> &'static str {
        match self {
            WireValue::Int(_) => "integer",
            WireValue::Float(_) => "float",
            WireValue::Text(_) => "string",
            WireValue::Bool(_) => "boolean",
        }
    }
}

impl From<&Value> for WireValue {
    fn from(v: &Value) -> Self {
        match v {
            Value::Float(x) => WireValue::Float(*x),
            Value::Int(i) => WireValue::Int(*i),
            Value::Text(s) => WireValue::Text(s.clone()),
            Value::Bool(b) => WireValue::Bool(*b),
            Value::Date(_) => WireValue::Text(v.to_string()),
        }
    }
}

impl fmt::Display for WireValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WireValue::Int(i) => write!(f, "{i}"),
            WireValue::Float(x) => write!(f, "{x}"),
            WireValue::Text(s) => write!(f, "{s:?}"),
            WireValue::Bool(b) => write!(f, "{b}"),
        }
    }
}

impl Serialize for WireValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            WireValue::Int(i) => s.serialize_i64(*i),
            WireValue::Float(x) => s.serialize_f64(*x),
            WireValue::Text(t) => s.serialize_str(t),
            WireValue::Bool(b) => s.serialize_bool(*b),
        }
    }
}

/// Class-specific payload of a prediction record.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Point {
        value: WireValue,
    },
    Named {
        family: Family,
        param1: f64,
        param2: Option<f64>,
    },
    Bin {
        cat: Vec<WireValue>,
        prob: Vec<f64>,
    },
    Sample {
        sample: Vec<WireValue>,
    },
    Quantile {
        quantile: Vec<f64>,
        value: Vec<WireValue>,
    },
}

impl Payload {
    pub fn kind(&self) -> ElementKind {
        match self {
            Payload::Point { .. } => ElementKind::Point,
            Payload::Named { .. } => ElementKind::Named,
            Payload::Bin { .. } => ElementKind::Bin,
            Payload::Sample { .. } => ElementKind::Sample,
            Payload::Quantile { .. } => ElementKind::Quantile,
        }
    }

    /// Wire form of a typed element.
    pub fn from_element(element: &PredictionElement) -> Payload {
        match element {
            PredictionElement::Point(v) => Payload::Point { value: v.into() },
            PredictionElement::Named(n) => Payload::Named {
                family: n.family(),
                param1: n.param1(),
                param2: n.param2(),
            },
            PredictionElement::Bin(b) => Payload::Bin {
                cat: b.entries().iter().map(|(c, _)| c.into()).collect(),
                prob: b.entries().iter().map(|(_, p)| *p).collect(),
            },
            PredictionElement::Sample(s) => Payload::Sample {
                sample: s.values().iter().map(WireValue::from).collect(),
            },
            PredictionElement::Quantile(q) => Payload::Quantile {
                quantile: q.entries().iter().map(|(l, _)| *l).collect(),
                value: q.entries().iter().map(|(_, v)| v.into()).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub unit: String,
    pub target: String,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForecastDocument {
    pub predictions: Vec<PredictionRecord>,
}

impl ForecastDocument {
    /// Wire document for a stored forecast, in canonical
    /// (unit, target, kind) order.
    pub fn from_forecast(forecast: &Forecast) -> Self {
        let predictions = forecast
            .predictions
            .iter()
            .flat_map(|((unit, target), prediction)| {
                prediction.elements().map(move |e| PredictionRecord {
                    unit: unit.clone(),
                    target: target.clone(),
                    payload: Payload::from_element(e),
                })
            })
            .collect();
        ForecastDocument { predictions }
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

fn check_size(bytes: &[u8]) -> Result<&str, FormatError> {
    if bytes.len() > MAX_DOCUMENT_BYTES {
        return Err(FormatError::single(
            ErrorCode::TooLarge,
            "$",
            format!(
                "document is {} bytes; the limit is {MAX_DOCUMENT_BYTES}",
                bytes.len()
            ),
        ));
    }
    std::str::from_utf8(bytes).map_err(|e| {
        FormatError::single(
            ErrorCode::NotUtf8,
            format!("byte {}", e.valid_up_to()),
            "input is not valid UTF-8",
        )
    })
}

fn parse_json(text: &str) -> Result<Json, FormatError> {
    serde_json::from_str(text).map_err(|e| {
        FormatError::single(
            ErrorCode::MalformedJson,
            format!("line {}, column {}", e.line(), e.column()),
            e.to_string(),
        )
    })
}

/// Walks an object, recording missing and unknown keys.
struct ObjectReader<'a> {
    map: &'a Map<String, Json>,
    path: String,
}

impl<'a> ObjectReader<'a> {
    fn new(v: &'a Json, path: &str, diags: &mut Vec<Diagnostic>) -> Option<Self> {
        match v.as_object() {
            Some(map) => Some(ObjectReader {
                map,
                path: path.to_string(),
            }),
            None => {
                diags.push(Diagnostic::new(
                    ErrorCode::NotAnObject,
                    path,
                    "expected a JSON object",
                ));
                None
            }
        }
    }

    fn reject_unknown(&self, allowed: &[&str], diags: &mut Vec<Diagnostic>) {
        for key in self.map.keys() {
            if !allowed.contains(&key.as_str()) {
                let message = if key == "issued_at" {
                    "issued_at is assigned by the archive at registration and cannot be submitted"
                        .to_string()
                } else {
                    format!("unknown key {key:?}; allowed keys are {allowed:?}")
                };
                diags.push(Diagnostic::new(
                    ErrorCode::UnknownKey,
                    format!("{}.{key}", self.path),
                    message,
                ));
            }
        }
    }

    fn required(&self, key: &str, diags: &mut Vec<Diagnostic>) -> Option<&'a Json> {
        let v = self.map.get(key);
        if v.is_none() {
            diags.push(Diagnostic::new(
                ErrorCode::MissingKey,
                format!("{}.{key}", self.path),
                format!("missing required key {key:?}"),
            ));
        }
        v
    }

    fn optional(&self, key: &str) -> Option<&'a Json> {
        self.map.get(key).filter(|v| !v.is_null())
    }

    fn child(&self, key: &str) -> String {
        format!("{}.{key}", self.path)
    }
}

fn shape(path: impl Into<String>, message: impl Into<String>) -> Diagnostic {
    Diagnostic::new(ErrorCode::ShapeMismatch, path, message)
}

fn read_string(v: &Json, path: &str, diags: &mut Vec<Diagnostic>) -> Option<String> {
    match v.as_str() {
        Some(s) => Some(s.to_string()),
        None => {
            diags.push(shape(path, "expected a string"));
            None
        }
    }
}

fn read_scalar(v: &Json, path: &str, diags: &mut Vec<Diagnostic>) -> Option<WireValue> {
    let w = WireValue::from_json(v);
    if w.is_none() {
        diags.push(shape(path, "expected a number, string or boolean"));
    }
    w
}

/// Numbers, or numeric strings such as `"0.30"`.
fn read_number(v: &Json, path: &str, diags: &mut Vec<Diagnostic>) -> Option<f64> {
    let x = match v {
        Json::Number(n) => n.as_f64(),
        Json::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
    .filter(|x| x.is_finite());
    if x.is_none() {
        diags.push(shape(path, "expected a finite number"));
    }
    x
}

fn read_array<'a>(v: &'a Json, path: &str, diags: &mut Vec<Diagnostic>) -> Option<&'a Vec<Json>> {
    let a = v.as_array();
    if a.is_none() {
        diags.push(shape(path, "expected an array"));
    }
    a
}

fn read_list<T>(
    v: &Json,
    path: &str,
    diags: &mut Vec<Diagnostic>,
    item: impl Fn(&Json, &str, &mut Vec<Diagnostic>) -> Option<T>,
) -> Option<Vec<T>> {
    let arr = read_array(v, path, diags)?;
    let before = diags.len();
    let out: Vec<Option<T>> = arr
        .iter()
        .enumerate()
        .map(|(i, x)| item(x, &format!("{path}[{i}]"), diags))
        .collect();
    if diags.len() > before {
        return None;
    }
    out.into_iter().collect()
}

fn parse_payload(class: &str, v: &Json, path: &str, diags: &mut Vec<Diagnostic>) -> Option<Payload> {
    let obj = ObjectReader::new(v, path, diags)?;
    let before = diags.len();
    let payload = match class {
        "point" => {
            obj.reject_unknown(&["value"], diags);
            let value = obj
                .required("value", diags)
                .and_then(|x| read_scalar(x, &obj.child("value"), diags));
            value.map(|value| Payload::Point { value })
        }
        "named" => {
            obj.reject_unknown(&["family", "param1", "param2"], diags);
            let family = obj
                .required("family", diags)
                .and_then(|x| read_string(x, &obj.child("family"), diags))
                .and_then(|name| {
                    let f = Family::parse(&name);
                    if f.is_none() {
                        diags.push(Diagnostic::new(
                            ErrorCode::UnknownFamily,
                            obj.child("family"),
                            format!("unknown family {name:?}"),
                        ));
                    }
                    f
                });
            let param1 = obj
                .required("param1", diags)
                .and_then(|x| read_number(x, &obj.child("param1"), diags));
            let param2 = match obj.optional("param2") {
                Some(x) => read_number(x, &obj.child("param2"), diags).map(Some),
                None => Some(None),
            };
            match (family, param1, param2) {
                (Some(family), Some(param1), Some(param2)) => Some(Payload::Named {
                    family,
                    param1,
                    param2,
                }),
                _ => None,
            }
        }
        "bin" => {
            obj.reject_unknown(&["cat", "prob"], diags);
            let cat = obj
                .required("cat", diags)
                .and_then(|x| read_list(x, &obj.child("cat"), diags, read_scalar));
            let prob = obj
                .required("prob", diags)
                .and_then(|x| read_list(x, &obj.child("prob"), diags, read_number));
            match (cat, prob) {
                (Some(cat), Some(prob)) if cat.len() == prob.len() => {
                    Some(Payload::Bin { cat, prob })
                }
                (Some(cat), Some(prob)) => {
                    diags.push(Diagnostic::new(
                        ErrorCode::LengthMismatch,
                        path,
                        format!("cat has {} entries but prob has {}", cat.len(), prob.len()),
                    ));
                    None
                }
                _ => None,
            }
        }
        "sample" => {
            obj.reject_unknown(&["sample"], diags);
            obj.required("sample", diags)
                .and_then(|x| read_list(x, &obj.child("sample"), diags, read_scalar))
                .map(|sample| Payload::Sample { sample })
        }
        "quantile" => {
            obj.reject_unknown(&["quantile", "value"], diags);
            let quantile = obj
                .required("quantile", diags)
                .and_then(|x| read_list(x, &obj.child("quantile"), diags, read_number));
            let value = obj
                .required("value", diags)
                .and_then(|x| read_list(x, &obj.child("value"), diags, read_scalar));
            match (quantile, value) {
                (Some(quantile), Some(value)) if quantile.len() == value.len() => {
                    Some(Payload::Quantile { quantile, value })
                }
                (Some(q), Some(v)) => {
                    diags.push(Diagnostic::new(
                        ErrorCode::LengthMismatch,
                        path,
                        format!("quantile has {} entries but value has {}", q.len(), v.len()),
                    ));
                    None
                }
                _ => None,
            }
        }
        _ => unreachable!("class checked by caller"),
    };
    if diags.len() > before {
        None
    } else {
        payload
    }
}

fn parse_document_value(root: &Json, path: &str, diags: &mut Vec<Diagnostic>) -> Option<ForecastDocument> {
    let obj = ObjectReader::new(root, path, diags)?;
    obj.reject_unknown(&["predictions"], diags);
    let records = obj
        .required("predictions", diags)
        .and_then(|x| read_array(x, &obj.child("predictions"), diags))?;
    let mut predictions = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let rpath = format!("{}.predictions[{i}]", path);
        let Some(r) = ObjectReader::new(rec, &rpath, diags) else {
            continue;
        };
        r.reject_unknown(&["unit", "target", "class", "prediction"], diags);
        let unit = r
            .required("unit", diags)
            .and_then(|x| read_string(x, &r.child("unit"), diags));
        let target = r
            .required("target", diags)
            .and_then(|x| read_string(x, &r.child("target"), diags));
        let class = r
            .required("class", diags)
            .and_then(|x| read_string(x, &r.child("class"), diags))
            .filter(|c| {
                let known = ElementKind::parse(c).is_some();
                if !known {
                    diags.push(Diagnostic::new(
                        ErrorCode::UnknownClass,
                        r.child("class"),
                        format!("unknown class {c:?}"),
                    ));
                }
                known
            });
        let prediction = r.required("prediction", diags);
        if let (Some(unit), Some(target), Some(class), Some(pred)) = (unit, target, class, prediction) {
            if let Some(payload) = parse_payload(&class, pred, &r.child("prediction"), diags) {
                predictions.push(PredictionRecord {
                    unit,
                    target,
                    payload,
                });
            }
        }
    }
    Some(ForecastDocument { predictions })
}

/// Parses a forecast JSON document.
pub fn parse_forecast(bytes: &[u8]) -> Result<ForecastDocument, FormatError> {
    let text = check_size(bytes)?;
    let root = parse_json(text)?;
    let mut diags = Vec::new();
    let doc = parse_document_value(&root, "$", &mut diags);
    match doc {
        Some(doc) if diags.is_empty() => Ok(doc),
        _ => Err(FormatError { diagnostics: diags }),
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    unit: &'a str,
    target: &'a str,
    class: &'static str,
    prediction: PayloadOut<'a>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum PayloadOut<'a> {
    Point {
        value: &'a WireValue,
    },
    Named {
        family: &'static str,
        param1: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        param2: Option<f64>,
    },
    Bin {
        cat: &'a [WireValue],
        prob: &'a [f64],
    },
    Sample {
        sample: &'a [WireValue],
    },
    Quantile {
        quantile: &'a [f64],
        value: &'a [WireValue],
    },
}

impl<'a> From<&'a Payload> for PayloadOut<'a> {
    fn from(p: &'a Payload) -> Self {
        match p {
            Payload::Point { value } => PayloadOut::Point { value },
            Payload::Named {
                family,
                param1,
                param2,
            } => PayloadOut::Named {
                family: family.as_str(),
                param1: *param1,
                param2: *param2,
            },
            Payload::Bin { cat, prob } => PayloadOut::Bin { cat, prob },
            Payload::Sample { sample } => PayloadOut::Sample { sample },
            Payload::Quantile { quantile, value } => PayloadOut::Quantile { quantile, value },
        }
    }
}

#[derive(Serialize)]
struct DocumentOut<'a> {
    predictions: Vec<RecordOut<'a>>,
}

fn document_out(doc: &ForecastDocument) -> DocumentOut<'_> {
    DocumentOut {
        predictions: doc
            .predictions
            .iter()
            .map(|r| RecordOut {
                unit: &r.unit,
                target: &r.target,
                class: r.payload.kind().as_str(),
                prediction: (&r.payload).into(),
            })
            .collect(),
    }
}

/// Serialises a forecast document. Keys appear in a fixed order and floats
/// use the shortest round-trip representation, so output is byte-stable.
/// Float values must be finite.
pub fn serialize_forecast(doc: &ForecastDocument) -> Vec<u8> {
    serde_json::to_vec(&document_out(doc)).expect("forecast document serialises")
}

/// Body of a forecast upload: the time-zero slot plus the document.
/// `issued_at` is deliberately not a field.
#[derive(Debug, Clone, PartialEq)]
pub struct UploadEnvelope {
    pub timezero: NaiveDate,
    pub source: Option<String>,
    pub forecast: ForecastDocument,
}

/// Parses `{"timezero": "YYYY-MM-DD", "source": "...", "forecast": {...}}`.
pub fn parse_upload(bytes: &[u8]) -> Result<UploadEnvelope, FormatError> {
    let text = check_size(bytes)?;
    let root = parse_json(text)?;
    let mut diags = Vec::new();
    let Some(obj) = ObjectReader::new(&root, "$", &mut diags) else {
        return Err(FormatError { diagnostics: diags });
    };
    obj.reject_unknown(&["timezero", "source", "forecast"], &mut diags);
    let timezero = obj
        .required("timezero", &mut diags)
        .and_then(|x| read_date(x, "$.timezero", &mut diags));
    let source = obj
        .optional("source")
        .and_then(|x| read_string(x, "$.source", &mut diags));
    let forecast = obj
        .required("forecast", &mut diags)
        .and_then(|x| parse_document_value(x, "$.forecast", &mut diags));
    match (timezero, forecast) {
        (Some(timezero), Some(forecast)) if diags.is_empty() => Ok(UploadEnvelope {
            timezero,
            source,
            forecast,
        }),
        _ => Err(FormatError { diagnostics: diags }),
    }
}

pub fn serialize_upload(envelope: &UploadEnvelope) -> Vec<u8> {
    #[derive(Serialize)]
    struct Out<'a> {
        timezero: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        source: Option<&'a str>,
        forecast: DocumentOut<'a>,
    }
    serde_json::to_vec(&Out {
        timezero: envelope.timezero.format("%Y-%m-%d").to_string(),
        source: envelope.source.as_deref(),
        forecast: document_out(&envelope.forecast),
    })
    .expect("upload envelope serialises")
}

fn read_date(v: &Json, path: &str, diags: &mut Vec<Diagnostic>) -> Option<NaiveDate> {
    let s = read_string(v, path, diags)?;
    let d = parse_iso_date(&s);
    if d.is_none() {
        diags.push(Diagnostic::new(
            ErrorCode::BadDate,
            path,
            format!("{s:?} is not an ISO-8601 YYYY-MM-DD date"),
        ));
    }
    d
}

/// A project's units, targets and time-zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectConfig {
    pub name: String,
    pub description: String,
    pub visibility: Visibility,
    pub units: Vec<Unit>,
    pub targets: Vec<TargetDefinition>,
    pub timezeros: Vec<TimeZero>,
    pub bin_sum_tolerance: f64,
}

impl ProjectConfig {
    pub fn unit(&self, code: &str) -> Option<&Unit> {
        self.units.iter().find(|u| u.code() == code)
    }

    pub fn target(&self, name: &str) -> Option<&TargetDefinition> {
        self.targets.iter().find(|t| t.name() == name)
    }

    pub fn timezero(&self, date: NaiveDate) -> Option<&TimeZero> {
        self.timezeros.iter().find(|t| t.date == date)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    visibility: Visibility,
    #[serde(default)]
    bin_sum_tolerance: Option<f64>,
    units: Vec<RawUnit>,
    targets: Vec<RawTarget>,
    timezeros: Vec<RawTimeZero>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUnit {
    code: String,
    #[serde(default)]
    name: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTarget {
    name: String,
    #[serde(rename = "type")]
    target_type: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    range: Option<Vec<Json>>,
    #[serde(default)]
    cats: Option<Vec<Json>>,
    #[serde(default)]
    is_step_ahead: bool,
    #[serde(default)]
    step_unit: Option<String>,
    #[serde(default)]
    step_count: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTimeZero {
    date: String,
    #[serde(default)]
    data_version_date: Option<String>,
}

/// Parses and fully validates a project configuration.
pub fn parse_project_config(bytes: &[u8]) -> Result<ProjectConfig, FormatError> {
    let text = check_size(bytes)?;
    let raw: RawConfig = serde_json::from_str(text).map_err(|e| {
        let code = if e.is_syntax() || e.is_eof() {
            ErrorCode::MalformedJson
        } else {
            ErrorCode::ShapeMismatch
        };
        FormatError::single(
            code,
            format!("line {}, column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    let mut diags = Vec::new();

    let tolerance = raw.bin_sum_tolerance.unwrap_or(DEFAULT_BIN_SUM_TOLERANCE);
    if !(tolerance.is_finite() && (0.0..1.0).contains(&tolerance)) {
        diags.push(Diagnostic::new(
            ErrorCode::InvalidTolerance,
            "$.bin_sum_tolerance",
            "tolerance must be in [0, 1)",
        ));
    }

    let mut units = Vec::new();
    let mut seen = HashSet::new();
    for (i, u) in raw.units.iter().enumerate() {
        let path = format!("$.units[{i}].code");
        if !seen.insert(u.code.clone()) {
            diags.push(Diagnostic::new(
                ErrorCode::DuplicateUnit,
                path,
                format!("duplicate unit {:?}", u.code),
            ));
            continue;
        }
        match Unit::new(&u.code, &u.name) {
            Ok(unit) => units.push(unit),
            Err(e) => diags.push(Diagnostic::new(ErrorCode::InvalidUnit, path, e.to_string())),
        }
    }

    let mut targets = Vec::new();
    let mut seen = HashSet::new();
    for (i, t) in raw.targets.iter().enumerate() {
        let path = format!("$.targets[{i}]");
        if !seen.insert(t.name.clone()) {
            diags.push(Diagnostic::new(
                ErrorCode::DuplicateTarget,
                format!("{path}.name"),
                format!("duplicate target {:?}", t.name),
            ));
            continue;
        }
        if let Some(target) = build_target(t, &path, &mut diags) {
            targets.push(target);
        }
    }

    let mut timezeros = Vec::new();
    let mut seen_dates = HashSet::new();
    let mut seen_versions = HashSet::new();
    for (i, tz) in raw.timezeros.iter().enumerate() {
        let path = format!("$.timezeros[{i}]");
        let date = read_date(&Json::String(tz.date.clone()), &format!("{path}.date"), &mut diags);
        let version = tz.data_version_date.as_ref().map(|s| {
            read_date(
                &Json::String(s.clone()),
                &format!("{path}.data_version_date"),
                &mut diags,
            )
        });
        let Some(date) = date else { continue };
        if !seen_dates.insert(date) {
            diags.push(Diagnostic::new(
                ErrorCode::DuplicateTimezero,
                format!("{path}.date"),
                format!("duplicate timezero {date}"),
            ));
            continue;
        }
        match version {
            None => timezeros.push(TimeZero::new(date)),
            Some(None) => {}
            Some(Some(v)) => {
                if !seen_versions.insert(v) {
                    diags.push(Diagnostic::new(
                        ErrorCode::DuplicateDataVersion,
                        format!("{path}.data_version_date"),
                        format!("data version date {v} is already paired with another timezero"),
                    ));
                } else {
                    timezeros.push(TimeZero::with_data_version(date, v));
                }
            }
        }
    }

    if !diags.is_empty() {
        return Err(FormatError { diagnostics: diags });
    }
    Ok(ProjectConfig {
        name: raw.name,
        description: raw.description,
        visibility: raw.visibility,
        units,
        targets,
        timezeros,
        bin_sum_tolerance: tolerance,
    })
}

fn build_target(t: &RawTarget, path: &str, diags: &mut Vec<Diagnostic>) -> Option<TargetDefinition> {
    let Some(target_type) = TargetType::parse(&t.target_type) else {
        diags.push(Diagnostic::new(
            ErrorCode::UnknownTargetType,
            format!("{path}.type"),
            format!(
                "unknown target type {:?}; expected continuous, discrete, nominal, binary or date",
                t.target_type
            ),
        ));
        return None;
    };
    let data_type = target_type.data_type();
    let before = diags.len();
    let coerce = |v: &Json, p: String, code: ErrorCode, diags: &mut Vec<Diagnostic>| {
        let value = WireValue::from_json(v).and_then(|w| w.coerce(data_type));
        if value.is_none() {
            diags.push(Diagnostic::new(
                code,
                p,
                format!("{v} is not a {data_type} value"),
            ));
        }
        value
    };
    let range = match &t.range {
        None => None,
        Some(r) if r.len() == 2 => {
            let lo = coerce(&r[0], format!("{path}.range[0]"), ErrorCode::RangeTypeMismatch, diags);
            let hi = coerce(&r[1], format!("{path}.range[1]"), ErrorCode::RangeTypeMismatch, diags);
            lo.zip(hi)
        }
        Some(_) => {
            diags.push(shape(format!("{path}.range"), "range must be [lower, upper]"));
            None
        }
    };
    let cats = t.cats.as_ref().map(|cats| {
        cats.iter()
            .enumerate()
            .filter_map(|(j, c)| {
                coerce(
                    c,
                    format!("{path}.cats[{j}]"),
                    ErrorCode::CategoryTypeMismatch,
                    diags,
                )
            })
            .collect::<Vec<_>>()
    });
    if diags.len() > before {
        return None;
    }
    let parts = TargetParts {
        name: t.name.clone(),
        target_type,
        description: t.description.clone(),
        range,
        categories: cats,
        is_step_ahead: t.is_step_ahead,
        step_unit: t.step_unit.clone(),
        step_count: t.step_count,
    };
    match TargetDefinition::new(parts) {
        Ok(target) => Some(target),
        Err(e) => {
            diags.push(Diagnostic::new(ErrorCode::InvalidTarget, path, e.to_string()));
            None
        }
    }
}

fn value_json(v: &Value) -> Json {
    serde_json::to_value(WireValue::from(v)).expect("wire value serialises")
}

/// Serialises a project configuration as pretty-printed JSON.
pub fn serialize_project_config(config: &ProjectConfig) -> Vec<u8> {
    let targets: Vec<Json> = config
        .targets
        .iter()
        .map(|t| {
            let mut m = Map::new();
            m.insert("name".into(), t.name().into());
            m.insert("type".into(), t.target_type().as_str().into());
            m.insert("description".into(), t.description().into());
            if let Some((lo, hi)) = t.range() {
                m.insert("range".into(), Json::Array(vec![value_json(lo), value_json(hi)]));
            }
            if let Some(cats) = t.categories() {
                m.insert("cats".into(), Json::Array(cats.iter().map(value_json).collect()));
            }
            m.insert("is_step_ahead".into(), t.is_step_ahead().into());
            if let Some(u) = t.step_unit() {
                m.insert("step_unit".into(), u.into());
            }
            if let Some(c) = t.step_count() {
                m.insert("step_count".into(), c.into());
            }
            Json::Object(m)
        })
        .collect();
    let doc = serde_json::json!({
        "name": config.name,
        "description": config.description,
        "visibility": config.visibility.as_str(),
        "bin_sum_tolerance": config.bin_sum_tolerance,
        "units": config.units.iter().map(|u| serde_json::json!({"code": u.code(), "name": u.name()})).collect::<Vec<_>>(),
        "targets": targets,
        "timezeros": config.timezeros.iter().map(|tz| {
            let mut m = Map::new();
            m.insert("date".into(), tz.date.format("%Y-%m-%d").to_string().into());
            if let Some(v) = tz.data_version_date {
                m.insert("data_version_date".into(), v.format("%Y-%m-%d").to_string().into());
            }
            Json::Object(m)
        }).collect::<Vec<_>>(),
    });
    let mut out = serde_json::to_vec_pretty(&doc).expect("config serialises");
    out.push(b'\n');
    out
}

/// A starter configuration covering every target type.
pub fn project_template() -> ProjectConfig {
    let date = |s: &str| parse_iso_date(s).expect("valid template date");
    let weekly = |name: &str, step: u32| {
        TargetParts::new(name, TargetType::Continuous)
            .description(format!("incident cases {step} week(s) after the time-zero"))
            .range(Value::Float(0.0), Value::Float(1.0e6))
            .categories(vec![
                Value::Float(0.0),
                Value::Float(100.0),
                Value::Float(1000.0),
                Value::Float(10000.0),
            ])
            .step_ahead("week", step)
            .build()
            .expect("valid template target")
    };
    ProjectConfig {
        name: "example-project".into(),
        description: "Template project; edit units, targets and time-zeros before creating."
            .into(),
        visibility: Visibility::Public,
        units: vec![
            Unit::new("loc1", "Location 1").expect("valid unit"),
            Unit::new("loc2", "Location 2").expect("valid unit"),
        ],
        targets: vec![
            weekly("1 wk ahead cases", 1),
            weekly("2 wk ahead cases", 2),
            TargetParts::new("season peak count", TargetType::Discrete)
                .description("peak weekly count this season")
                .range(Value::Int(0), Value::Int(100_000))
                .categories(vec![Value::Int(0), Value::Int(1), Value::Int(2), Value::Int(3)])
                .build()
                .expect("valid template target"),
            TargetParts::new("season severity", TargetType::Nominal)
                .categories(vec![
                    Value::Text("low".into()),
                    Value::Text("moderate".into()),
                    Value::Text("high".into()),
                ])
                .build()
                .expect("valid template target"),
            TargetParts::new("above baseline", TargetType::Binary)
                .build()
                .expect("valid template target"),
            TargetParts::new("season onset", TargetType::Date)
                .categories(vec![
                    Value::Date(date("2020-10-05")),
                    Value::Date(date("2020-10-12")),
                    Value::Date(date("2020-10-19")),
                ])
                .build()
                .expect("valid template target"),
        ],
        timezeros: vec![
            TimeZero::new(date("2020-10-05")),
            TimeZero::with_data_version(date("2020-10-12"), date("2020-10-11")),
        ],
        bin_sum_tolerance: DEFAULT_BIN_SUM_TOLERANCE,
    }
}

/// One observed value.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRow {
    pub timezero: NaiveDate,
    pub unit: String,
    pub target: String,
    pub value: Value,
}

/// Observed values keyed by (time-zero, unit, target).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TruthTable {
    rows: BTreeMap<(NaiveDate, String, String), Value>,
}

impl TruthTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a row; returns `false` if the key was already present.
    pub fn insert(&mut self, row: TruthRow) -> bool {
        use std::collections::btree_map::Entry;
        match self.rows.entry((row.timezero, row.unit, row.target)) {
            Entry::Occupied(_) => false,
            Entry::Vacant(e) => {
                e.insert(row.value);
                true
            }
        }
    }

    pub fn get(&self, timezero: NaiveDate, unit: &str, target: &str) -> Option<&Value> {
        self.rows
            .get(&(timezero, unit.to_string(), target.to_string()))
    }

    pub fn rows(&self) -> impl Iterator<Item = TruthRow> + '_ {
        self.rows.iter().map(|((tz, u, t), v)| TruthRow {
            timezero: *tz,
            unit: u.clone(),
            target: t.clone(),
            value: v.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl FromIterator<TruthRow> for TruthTable {
    fn from_iter<I: IntoIterator<Item = TruthRow>>(iter: I) -> Self {
        let mut t = TruthTable::new();
        for row in iter {
            t.insert(row);
        }
        t
    }
}

/// Parsed truth plus rows that were skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthParse {
    pub table: TruthTable,
    pub warnings: Vec<Diagnostic>,
}

/// Parses a truth CSV (`timezero,unit,target,value`) against a project.
/// Rows naming unknown time-zeros, units or targets are skipped with a
/// warning; duplicates and uncoercible values are errors.
pub fn parse_truth_csv(bytes: &[u8], project: &ProjectConfig) -> Result<TruthParse, FormatError> {
    check_size(bytes)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut records = reader.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => {
            return Err(FormatError::single(ErrorCode::MalformedCsv, "line 1", e.to_string()))
        }
        None => {
            return Err(FormatError::single(
                ErrorCode::BadHeader,
                "line 1",
                "empty file; expected header timezero,unit,target,value",
            ))
        }
    };
    if header.iter().collect::<Vec<_>>() != TRUTH_HEADER {
        return Err(FormatError::single(
            ErrorCode::BadHeader,
            "line 1",
            format!(
                "header must be exactly timezero,unit,target,value (got {})",
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }

    let mut table = TruthTable::new();
    let mut warnings = Vec::new();
    let mut errors = Vec::new();
    for rec in records {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                errors.push(Diagnostic::new(
                    ErrorCode::MalformedCsv,
                    format!("line {line}"),
                    e.to_string(),
                ));
                continue;
            }
        };
        let line = rec.position().map_or(0, |p| p.line());
        let loc = format!("line {line}");
        if rec.len() != 4 {
            errors.push(Diagnostic::new(
                ErrorCode::MalformedCsv,
                loc,
                format!("expected 4 fields, found {}", rec.len()),
            ));
            continue;
        }
        let Some(timezero) = parse_iso_date(&rec[0]) else {
            errors.push(Diagnostic::new(
                ErrorCode::BadDate,
                loc,
                format!("{:?} is not an ISO-8601 YYYY-MM-DD date", &rec[0]),
            ));
            continue;
        };
        let (unit, target_name) = (&rec[1], &rec[2]);
        let target = project.target(target_name);
        let unknown = if project.timezero(timezero).is_none() {
            Some(format!("unknown timezero {timezero}"))
        } else if project.unit(unit).is_none() {
            Some(format!("unknown unit {unit:?}"))
        } else if target.is_none() {
            Some(format!("unknown target {target_name:?}"))
        } else {
            None
        };
        if let Some(message) = unknown {
            warnings.push(Diagnostic::new(
                ErrorCode::UnknownReference,
                loc,
                format!("{message}; row skipped"),
            ));
            continue;
        }
        let target = target.expect("checked above");
        let raw = &rec[3];
        let Some(value) = Value::parse_as(raw, target.data_type())
            .filter(|v| !matches!(v, Value::Text(s) if s.is_empty()))
        else {
            errors.push(Diagnostic::new(
                ErrorCode::TypeMismatch,
                loc,
                format!(
                    "type mismatch: {raw:?} is not a {} value for {} target {target_name:?}",
                    target.data_type(),
                    target.target_type()
                ),
            ));
            continue;
        };
        let fresh = table.insert(TruthRow {
            timezero,
            unit: unit.to_string(),
            target: target_name.to_string(),
            value,
        });
        if !fresh {
            errors.push(Diagnostic::new(
                ErrorCode::DuplicateTruthRow,
                loc,
                format!("duplicate truth row for ({timezero}, {unit}, {target_name})"),
            ));
        }
    }
    if !errors.is_empty() {
        return Err(FormatError {
            diagnostics: errors,
        });
    }
    Ok(TruthParse { table, warnings })
}

/// Writes a truth table in canonical (timezero, unit, target) order.
pub fn serialize_truth_csv(table: &TruthTable) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRUTH_HEADER).expect("in-memory write");
    for row in table.rows() {
        w.write_record([
            row.timezero.format("%Y-%m-%d").to_string(),
            row.unit,
            row.target,
            row.value.to_string(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

impl fmt::Display for ForecastDocument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&String::from_utf8_lossy(&serialize_forecast(self)))
    }
}
