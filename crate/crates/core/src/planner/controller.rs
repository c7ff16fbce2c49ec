use serde::{Deserialize, Serialize};

use super::PlannerError;
use crate::dynamics::{Controller, PlantState};
use crate::stl::HYPO_THRESHOLD;

/// User-facing pump settings plus the stand-in controller gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// mg/dl
    pub set_point: f64,
    /// g per U
    pub cr: f64,
    /// min
    pub insulin_action_time: f64,
    /// U/min
    pub basal_rate: f64,
    /// mg/dl
    pub meal_set_point: f64,
    /// min after the meal
    pub revert_after: f64,
    /// U/min per mg/dl above the set point
    pub gain: f64,
    /// U/min
    pub u_max: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            set_point: 90.0,
            cr: 10.0,
            insulin_action_time: 240.0,
            basal_rate: 1.0 / 60.0,
            meal_set_point: 110.0,
            revert_after: 120.0,
            gain: 2e-4,
            u_max: 0.05,
        }
    }
}

impl ControllerConfig {
    pub fn with_cr(self, cr: f64) -> Self {
        Self { cr, ..self }
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        let bad =
            |what: &str, v: f64| Err(PlannerError::InvalidConfig(format!("{what} (got {v})")));
        if !(1.0..=50.0).contains(&self.cr) {
            return bad("cr must lie in [1, 50]", self.cr);
        }
        for (name, v) in [
            ("set_point", self.set_point),
            ("meal_set_point", self.meal_set_point),
        ] {
            if !(80.0..=140.0).contains(&v) {
                return bad(&format!("{name} must lie in [80, 140]"), v);
            }
        }
        if !(self.insulin_action_time.is_finite() && self.insulin_action_time > 0.0) {
            return bad(
                "insulin_action_time must be positive",
                self.insulin_action_time,
            );
        }
        if !(self.revert_after.is_finite() && self.revert_after >= 0.0) {
            return bad("revert_after must be >= 0", self.revert_after);
        }
        if !(self.basal_rate.is_finite() && self.basal_rate >= 0.0) {
            return bad("basal_rate must be >= 0", self.basal_rate);
        }
        if !(self.gain.is_finite() && self.gain >= 0.0) {
            return bad("gain must be >= 0", self.gain);
        }
        if !(self.u_max.is_finite() && self.u_max >= self.basal_rate) {
            return bad("u_max must be >= basal_rate", self.u_max);
        }
        Ok(())
    }

    pub fn controller(&self) -> ReferenceController {
        ReferenceController {
            basal_rate: self.basal_rate,
            gain: self.gain,
            u_max: self.u_max,
        }
    }
}

/// Proportional correction around the basal rate with a hypoglycemia suspend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceController {
    pub basal_rate: f64,
    pub gain: f64,
    pub u_max: f64,
}

impl Controller for ReferenceController {
    fn rate(&self, state: &PlantState, set_point: f64) -> f64 {
        if state.glucose < HYPO_THRESHOLD {
            return 0.0;
        }
        (self.basal_rate + self.gain * (state.glucose - set_point)).clamp(0.0, self.u_max)
    }
}

pub fn reference_controller(state: &PlantState, config: &ControllerConfig) -> f64 {
    config.controller().rate(state, config.set_point)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn at(g: f64) -> PlantState {
        PlantState::new(0.0, 0.0, 0.0, g)
    }

    #[test]
    fn examples() {
        let c = ControllerConfig::default();
        assert_eq!(reference_controller(&at(90.0), &c), c.basal_rate);
        assert_eq!(reference_controller(&at(65.0), &c), 0.0);
        let c = ControllerConfig {
            gain: 1e-3,
            u_max: 1.0,
            ..c
        };
        assert!((reference_controller(&at(140.0), &c) - (c.basal_rate + 0.05)).abs() < 1e-15);
        let c = ControllerConfig { u_max: 0.05, ..c };
        assert_eq!(reference_controller(&at(140.0), &c), 0.05);
    }

    #[test]
    fn validation() {
        assert!(ControllerConfig::default().validate().is_ok());
        assert!(ControllerConfig::default().with_cr(0.5).validate().is_err());
        assert!(ControllerConfig {
            set_point: 70.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ControllerConfig {
            insulin_action_time: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn output_bounded(g in 20.0..500.0f64, s in 80.0..140.0f64, gain in 0.0..0.01f64) {
            let c = ControllerConfig { gain, set_point: s, ..Default::default() };
            let u = reference_controller(&at(g), &c);
            prop_assert!((0.0..=c.u_max).contains(&u));
            if g < 70.0 { prop_assert_eq!(u, 0.0); }
        }
    }
}
