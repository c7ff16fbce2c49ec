//! Meal boluses, IOB estimators, the stand-in controller and usage plans.

mod bolus;
mod controller;
mod plan;

use thiserror::Error;

pub use bolus::{
    compute_bolus, compute_bolus_faulty, iob_exact, iob_linear, round_dose, IobMode, DOSE_INCREMENT,
};
pub use controller::{reference_controller, ControllerConfig, ReferenceController};
pub use plan::{
    build_meal_plan, build_meal_plan_with, BolusFormula, IobEstimator, MealEvent, PlanMode,
    PlanProvenance, PlannedBolus, SetPointChange, UsagePlan,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlannerError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid controller config: {0}")]
    InvalidConfig(String),
    #[error("IOB mode mismatch: {0}")]
    ModeMismatch(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
}
