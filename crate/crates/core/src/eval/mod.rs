//! Metrics, a synthetic table generator with controlled characteristics, and
//! a logistic-regression baseline.

mod baseline;
mod metrics;
mod synth;

use thiserror::Error;

pub use baseline::{baseline_linear, stratified_split, BaselineConfig, LinearClassifier};
pub use metrics::{auc, f_score, weighted_accuracy, AccuracyWeighting, MetricSet, DECISION_THRESHOLD};
pub use synth::{has_planted_pattern, synth_generate, MissingRates, PlantedSignal, SynthConfig};

use crate::numeric::NumericError;
use crate::table::TableError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels contain a single class")]
    SingleClass,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite input")]
    NonFinite,
    #[error("infeasible synthetic config: {0}")]
    InfeasibleConfig(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Table(#[from] TableError),
}
