use serde::{Deserialize, Serialize};

use super::bolus::{compute_bolus, compute_bolus_faulty, iob_linear};
use super::controller::ControllerConfig;
use super::PlannerError;
use crate::dynamics::{insulin_remaining, Bolus, Coefficients, SetPointSchedule, Trace};
use crate::provenance::config_hash;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MealEvent {
    /// min, relative to the end of the context trace
    pub time: f64,
    /// g
    pub carbs: f64,
}

impl MealEvent {
    pub fn new(time: f64, carbs: f64) -> Result<Self, PlannerError> {
        let m = Self { time, carbs };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        if !(self.carbs.is_finite() && self.carbs > 0.0) {
            return Err(PlannerError::InvalidInput(format!(
                "meal carbs must be > 0 (got {})",
                self.carbs
            )));
        }
        if !self.time.is_finite() {
            return Err(PlannerError::InvalidInput(
                "meal time must be finite".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetPointChange {
    pub t_min: f64,
    pub mgdl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannedBolus {
    pub t_min: f64,
    pub units: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanProvenance {
    /// IOB estimator that fed the bolus formula.
    pub estimator: String,
    /// `standard` or `faulty_additive`.
    pub formula: String,
    /// IOB used in the formula (U).
    pub iob_units: f64,
    pub config_hash: String,
}

/// Timed set-point changes plus external boluses over `[0, T]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UsagePlan {
    #[serde(default)]
    pub setpoints: Vec<SetPointChange>,
    #[serde(default)]
    pub boluses: Vec<PlannedBolus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<PlanProvenance>,
}

impl UsagePlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single_bolus(t_min: f64, units: f64) -> Self {
        Self {
            boluses: vec![PlannedBolus { t_min, units }],
            ..Self::default()
        }
    }

    pub fn total_units(&self) -> f64 {
        self.boluses.iter().map(|b| b.units).sum()
    }

    pub fn validate(&self, horizon: f64) -> Result<(), PlannerError> {
        let in_horizon = |t: f64| t.is_finite() && (0.0..=horizon).contains(&t);
        for b in &self.boluses {
            if !in_horizon(b.t_min) {
                return Err(PlannerError::InvalidPlan(format!(
                    "bolus time {} outside [0, {horizon}]",
                    b.t_min
                )));
            }
            if !(b.units.is_finite() && b.units >= 0.0) {
                return Err(PlannerError::InvalidPlan(format!(
                    "bolus dose must be >= 0 (got {})",
                    b.units
                )));
            }
        }
        let mut times: Vec<f64> = Vec::with_capacity(self.setpoints.len());
        for s in &self.setpoints {
            if !in_horizon(s.t_min) {
                return Err(PlannerError::InvalidPlan(format!(
                    "set-point time {} outside [0, {horizon}]",
                    s.t_min
                )));
            }
            if !s.mgdl.is_finite() || s.mgdl <= 0.0 {
                return Err(PlannerError::InvalidPlan(format!(
                    "invalid set point {}",
                    s.mgdl
                )));
            }
            if times.contains(&s.t_min) {
                return Err(PlannerError::InvalidPlan(format!(
                    "two set points at t = {}",
                    s.t_min
                )));
            }
            times.push(s.t_min);
        }
        Ok(())
    }

    /// Set-point trajectory starting from `initial`.
    pub fn set_point_schedule(&self, initial: f64) -> SetPointSchedule {
        let mut changes: Vec<(f64, f64)> =
            self.setpoints.iter().map(|s| (s.t_min, s.mgdl)).collect();
        changes.sort_by(|a, b| a.0.total_cmp(&b.0));
        SetPointSchedule { initial, changes }
    }

    pub fn bolus_inputs(&self) -> Vec<Bolus> {
        let mut v: Vec<Bolus> = self
            .boluses
            .iter()
            .map(|b| Bolus {
                time: b.t_min,
                dose: b.units,
            })
            .collect();
        v.sort_by(|a, b| a.time.total_cmp(&b.time));
        v
    }
}

/// Where the IOB in the bolus formula comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum IobEstimator {
    /// Insulin remaining in the model state at the end of the context trace.
    Exact { coeffs: Coefficients },
    /// Linear decay of the logged doses (times relative to the end of the context).
    Linear { doses: Vec<Bolus> },
    /// A value supplied by the user.
    Given { units: f64 },
}

impl IobEstimator {
    pub fn name(&self) -> &'static str {
        match self {
            IobEstimator::Exact { .. } => "exact",
            IobEstimator::Linear { .. } => "linear",
            IobEstimator::Given { .. } => "given",
        }
    }

    /// IOB in U at the end of `context`.
    pub fn estimate(
        &self,
        config: &ControllerConfig,
        context: &Trace,
    ) -> Result<f64, PlannerError> {
        match self {
            IobEstimator::Exact { coeffs } => {
                Ok(insulin_remaining(&context.last().state, coeffs, config.basal_rate).max(0.0))
            }
            IobEstimator::Linear { doses } => iob_linear(doses, 0.0, config.insulin_action_time),
            IobEstimator::Given { units } => {
                if units.is_finite() && *units >= 0.0 {
                    Ok(*units)
                } else {
                    Err(PlannerError::InvalidInput(format!(
                        "IOB must be >= 0 (got {units})"
                    )))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BolusFormula {
    Standard,
    /// Research baseline only; never offered in the advising path.
    FaultyAdditive,
}

/// Planner variants compared in scenario suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Exact,
    Linear,
    Faulty,
}

impl PlanMode {
    pub const ALL: [PlanMode; 3] = [PlanMode::Exact, PlanMode::Linear, PlanMode::Faulty];

    pub fn as_str(self) -> &'static str {
        match self {
            PlanMode::Exact => "exact",
            PlanMode::Linear => "linear",
            PlanMode::Faulty => "faulty",
        }
    }

    pub fn formula(self) -> BolusFormula {
        match self {
            PlanMode::Faulty => BolusFormula::FaultyAdditive,
            _ => BolusFormula::Standard,
        }
    }
}

impl std::str::FromStr for PlanMode {
    type Err = PlannerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(PlanMode::Exact),
            "linear" => Ok(PlanMode::Linear),
            "faulty" => Ok(PlanMode::Faulty),
            other => Err(PlannerError::InvalidInput(format!(
                "unknown planner mode `{other}` (expected exact, linear or faulty)"
            ))),
        }
    }
}

/// Meal plan: raise the set point at the meal, revert after `revert_after`,
/// and bolus by the standard formula.
pub fn build_meal_plan(
    meal: &MealEvent,
    config: &ControllerConfig,
    estimator: &IobEstimator,
    context: &Trace,
    horizon: f64,
) -> Result<UsagePlan, PlannerError> {
    build_meal_plan_with(
        meal,
        config,
        estimator,
        context,
        horizon,
        BolusFormula::Standard,
    )
}

pub fn build_meal_plan_with(
    meal: &MealEvent,
    config: &ControllerConfig,
    estimator: &IobEstimator,
    context: &Trace,
    horizon: f64,
    formula: BolusFormula,
) -> Result<UsagePlan, PlannerError> {
    meal.validate()?;
    config.validate()?;
    if !(horizon.is_finite() && horizon > 0.0) || meal.time < 0.0 || meal.time > horizon {
        return Err(PlannerError::InvalidInput(format!(
            "meal time {} outside the planning horizon [0, {horizon}]",
            meal.time
        )));
    }
    let iob = estimator.estimate(config, context)?;
    let units = match formula {
        BolusFormula::Standard => compute_bolus(meal.carbs, config.cr, iob)?,
        BolusFormula::FaultyAdditive => compute_bolus_faulty(meal.carbs, config.cr, iob)?,
    };
    let mut setpoints = vec![SetPointChange {
        t_min: meal.time,
        mgdl: config.meal_set_point,
    }];
    let revert = meal.time + config.revert_after;
    if revert <= horizon && config.revert_after > 0.0 {
        setpoints.push(SetPointChange {
            t_min: revert,
            mgdl: config.set_point,
        });
    }
    let plan = UsagePlan {
        setpoints,
        boluses: vec![PlannedBolus {
            t_min: meal.time,
            units,
        }],
        provenance: Some(PlanProvenance {
            estimator: estimator.name().into(),
            formula: match formula {
                BolusFormula::Standard => "standard".into(),
                BolusFormula::FaultyAdditive => "faulty_additive".into(),
            },
            iob_units: iob,
            config_hash: config_hash(config),
        }),
    };
    plan.validate(horizon)?;
    Ok(plan)
}
