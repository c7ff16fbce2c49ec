//! Insulin pharmacokinetics and forward simulation.
//!
//! The insulin subsystem is the three-state model
//!
//! ```text
//! dy/dt   = z
//! dz/dt   = -2 k1 z - k1^2 y + k1^2 u
//! diob/dt = -n iob + p1 (y + I_b)
//! ```
//!
//! extended with a one-compartment glucose model (see [`GlucoseParams`]) so
//! that plans can be checked for safety by forward simulation. Integration is
//! fixed-step classical RK4.

mod integrate;
mod model;
mod trace;

use thiserror::Error;

pub use integrate::{
    rk4_step, simulate, simulate_insulin, BasalSegment, Bolus, ControlLoop, Controller,
    ControllerOff, InputSchedule, Meal, Plant, SetPointSchedule, SimConfig,
};
pub use model::{
    bmm_derivative, closed_form_insulin, glucose_derivative, insulin_remaining, plant_derivative,
    CoefficientRanges, Coefficients, GlucoseParams, Interval, PlantState, StateDerivative,
    ISF_REFERENCE_GLUCOSE,
};
pub use trace::{Sample, Trace, TRACE_CSV_HEADER};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("invalid coefficient {name} = {value}")]
    InvalidCoefficient { name: &'static str, value: f64 },
    #[error("coefficient {name} = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("invalid glucose parameter {name} = {value}")]
    InvalidGlucoseParam { name: &'static str, value: f64 },
    #[error("invalid step size {0}")]
    InvalidStep(f64),
    #[error("invalid horizon {0}")]
    InvalidHorizon(f64),
    #[error("invalid input schedule: {0}")]
    InvalidSchedule(String),
    #[error("state became non-finite at t = {t} min")]
    NonFinite { t: f64 },
    #[error("trace: {0}")]
    Trace(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}
