//! Sampled-trace signal temporal logic: quantitative robustness, glycemic
//! outcome metrics and the ADA time-below-range criterion.

mod formula;
mod metrics;
mod robustness;

use thiserror::Error;

pub use formula::{Comparator, Signal, StlFormula};
pub use metrics::{
    ada_report, ada_safety, hypo_events, outcome_metrics, outcome_metrics_of, AdaReport,
    OutcomeMetrics, HYPER_THRESHOLD,
};
pub use robustness::{robustness, robustness_signal, satisfies, Robustness};

pub const HYPO_THRESHOLD: f64 = 70.0;
/// Maximum tolerated time-below-range fraction.
pub const ADA_TBR_LIMIT: f64 = 0.04;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StlError {
    #[error("window [{from}, {to}] min is outside the trace [{t0}, {t_end}]")]
    Window {
        from: f64,
        to: f64,
        t0: f64,
        t_end: f64,
    },
    #[error("interval [{a}, {b}] contains no sample at dt = {dt}")]
    EmptyWindow { a: f64, b: f64, dt: f64 },
    #[error("t = {t} is not a sample time of the trace [{t0}, {t_end}]")]
    NotOnGrid { t: f64, t0: f64, t_end: f64 },
    #[error("empty trace")]
    EmptyTrace,
    #[error("invalid formula: {0}")]
    InvalidFormula(String),
    #[error("parse error at byte {pos}: {message}")]
    Parse { pos: usize, message: String },
}
