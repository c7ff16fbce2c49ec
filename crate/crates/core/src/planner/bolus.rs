use serde::{Deserialize, Serialize};

use super::PlannerError;
use crate::dynamics::{Bolus, PlantState};

/// Bolus-wizard IOB: each dose decays linearly to zero over `action_time`.
pub fn iob_linear(doses: &[Bolus], now: f64, action_time: f64) -> Result<f64, PlannerError> {
    if !(action_time.is_finite() && action_time > 0.0) {
        return Err(PlannerError::InvalidConfig(format!(
            "insulin action time must be positive (got {action_time})"
        )));
    }
    Ok(doses
        .iter()
        .filter(|d| d.time <= now)
        .map(|d| d.dose * (1.0 - (now - d.time) / action_time).max(0.0))
        .sum())
}

/// How the `iob` state is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IobMode {
    /// Insulin units.
    Units,
    /// Fraction of a reference dose (traces normalized to start at 1.0).
    Percentage,
}

/// Convert the `iob` state to insulin units. Percentage mode requires a
/// reference dose; unit mode forbids one.
pub fn iob_exact(
    state: &PlantState,
    mode: IobMode,
    reference_dose: Option<f64>,
) -> Result<f64, PlannerError> {
    match (mode, reference_dose) {
        (IobMode::Units, None) => Ok(state.iob),
        (IobMode::Percentage, Some(r)) if r.is_finite() && r > 0.0 => Ok(state.iob * r),
        (IobMode::Percentage, Some(r)) => Err(PlannerError::InvalidInput(format!(
            "reference dose must be positive (got {r})"
        ))),
        (IobMode::Percentage, None) => Err(PlannerError::ModeMismatch(
            "percentage-mode IOB needs a reference dose".into(),
        )),
        (IobMode::Units, Some(_)) => Err(PlannerError::ModeMismatch(
            "unit-mode IOB does not take a reference dose".into(),
        )),
    }
}

fn check_inputs(carbs: f64, cr: f64, iob: f64) -> Result<(), PlannerError> {
    if !(cr.is_finite() && cr > 0.0) {
        return Err(PlannerError::InvalidInput(format!(
            "carb ratio must be positive (got {cr})"
        )));
    }
    if !(carbs.is_finite() && carbs >= 0.0) {
        return Err(PlannerError::InvalidInput(format!(
            "carbs must be >= 0 (got {carbs})"
        )));
    }
    if !(iob.is_finite() && iob >= 0.0) {
        return Err(PlannerError::InvalidInput(format!(
            "IOB must be >= 0 (got {iob})"
        )));
    }
    Ok(())
}

/// Doses are delivered in whole units.
pub const DOSE_INCREMENT: f64 = 1.0;

/// Round a dose to the nearest delivery increment, clamped at zero.
pub fn round_dose(units: f64) -> f64 {
    ((units / DOSE_INCREMENT).round() * DOSE_INCREMENT).max(0.0)
}

/// Meal bolus `carbs / cr - iob`, rounded to whole units.
pub fn compute_bolus(carbs: f64, cr: f64, iob: f64) -> Result<f64, PlannerError> {
    check_inputs(carbs, cr, iob)?;
    Ok(round_dose(carbs / cr - iob))
}

/// The additive error `carbs / cr + iob`, rounded the same way. Research
/// baseline only.
pub fn compute_bolus_faulty(carbs: f64, cr: f64, iob: f64) -> Result<f64, PlannerError> {
    check_inputs(carbs, cr, iob)?;
    Ok(round_dose(carbs / cr + iob))
}
