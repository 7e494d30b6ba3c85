//! Core library of the forecast archive.
//!
//! The crate is organised around the prediction data model:
//!
//! - [`model`]: targets, units, time-zeros and the five prediction-element kinds,
//!   together with the target-type / element-kind validity matrix.
//! - [`format`]: the forecast JSON wire format, truth CSV and project config JSON.
//! - [`validation`]: the upload-time rule catalog.
//! - [`conversion`]: translations between element representations.
//! - [`scoring`]: proper scores and the score dispatch matrix.
//! - [`store`]: the embedded relational archive.
//!
//! Numerical kernels (special functions, named distributions, score formulas)
//! are generic over [`Scalar`]; the archive itself works in `f64` through the
//! aliases defined here.

pub mod conversion;
pub mod distribution;
pub mod format;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod scoring;
pub mod special;
pub mod store;
pub mod validation;

pub use scalar::Scalar;

/// Named distribution over `f64`, the precision used throughout the archive.
pub type NamedDistribution = model::NamedDistribution<f64>;
/// Single-precision named distribution, for callers that only need `f32` kernels.
pub type NamedDistribution32 = model::NamedDistribution<f32>;

pub use format::{ForecastDocument, ProjectConfig, TruthTable};
pub use model::{
    BinElement, ElementKind, Family, Forecast, Prediction, PredictionElement, QuantileElement,
    SampleElement, TargetDefinition, TargetType, TimeZero, Unit, Value,
};
pub use scoring::{ScoreId, ScoreKind, ScoreRecord};
pub use store::Store;
pub use validation::{RuleViolation, Severity};
