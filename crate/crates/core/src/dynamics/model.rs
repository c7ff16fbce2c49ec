use serde::{Deserialize, Serialize};

use super::DynamicsError;

/// Closed interval used for coefficient ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// Affine map from the unit interval onto this one.
    pub fn from_unit(&self, s: f64) -> f64 {
        self.lo + self.width() * s
    }
}

/// Insulin dynamics coefficients `{k1, n, p1}` plus the basal insulin level.
///
/// Rates are per unit of simulation time (minutes unless stated otherwise).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    /// Subcutaneous insulin diffusion rate.
    pub k1: f64,
    /// IOB clearance rate.
    pub n: f64,
    /// IOB appearance gain.
    pub p1: f64,
    /// Basal insulin level, in the units of `y`.
    pub i_b: f64,
}

impl Coefficients {
    pub fn new(k1: f64, n: f64, p1: f64, i_b: f64) -> Result<Self, DynamicsError> {
        let c = Self { k1, n, p1, i_b };
        c.validate()?;
        Ok(c)
    }

    /// The simulated virtual patient (k1 = 0.098, n = 0.1406, p1 = 0.028, no endogenous basal).
    pub fn virtual_patient() -> Self {
        Self {
            k1: 0.098,
            n: 0.1406,
            p1: 0.028,
            i_b: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let checks: [(&'static str, f64, bool); 4] = [
            ("k1", self.k1, self.k1 > 0.0),
            ("n", self.n, self.n > 0.0),
            ("p1", self.p1, self.p1 >= 0.0),
            ("i_b", self.i_b, self.i_b >= 0.0),
        ];
        for (name, value, ok) in checks {
            if !value.is_finite() || !ok {
                return Err(DynamicsError::InvalidCoefficient { name, value });
            }
        }
        Ok(())
    }

    /// Rescale every rate by `factor`, e.g. 60 to turn per-second rates into per-minute ones.
    pub fn rescale_time(&self, factor: f64) -> Self {
        Self {
            k1: self.k1 * factor,
            n: self.n * factor,
            p1: self.p1 * factor,
            i_b: self.i_b,
        }
    }

    /// IOB level held by a constant insulin rate `u`.
    pub fn steady_iob(&self, u: f64) -> f64 {
        self.p1 * (u + self.i_b) / self.n
    }
}

/// Physiological ranges the estimator maps its outputs into.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRanges {
    pub k1: Interval,
    pub n: Interval,
    pub p1: Interval,
}

impl Default for CoefficientRanges {
    fn default() -> Self {
        Self {
            k1: Interval::new(0.005, 0.2),
            n: Interval::new(0.01, 0.3),
            p1: Interval::new(0.001, 0.1),
        }
    }
}

impl CoefficientRanges {
    pub fn contains(&self, c: &Coefficients) -> bool {
        self.k1.contains(c.k1) && self.n.contains(c.n) && self.p1.contains(c.p1)
    }

    pub fn check(&self, c: &Coefficients) -> Result<(), DynamicsError> {
        c.validate()?;
        for (name, value, range) in [
            ("k1", c.k1, self.k1),
            ("n", c.n, self.n),
            ("p1", c.p1, self.p1),
        ] {
            if !range.contains(value) {
                return Err(DynamicsError::OutOfRange {
                    name,
                    value,
                    lo: range.lo,
                    hi: range.hi,
                });
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [Interval; 3] {
        [self.k1, self.n, self.p1]
    }
}

/// Plant state `{y, z, iob}` extended with blood glucose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub y: f64,
    pub z: f64,
    pub iob: f64,
    /// mg/dl
    pub glucose: f64,
}

impl PlantState {
    pub fn new(y: f64, z: f64, iob: f64, glucose: f64) -> Self {
        Self { y, z, iob, glucose }
    }

    /// Insulin subsystem at rest under a constant rate `u`.
    pub fn insulin_steady_state(coeffs: &Coefficients, u: f64, glucose: f64) -> Self {
        Self {
            y: u,
            z: 0.0,
            iob: coeffs.steady_iob(u),
            glucose,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.y.is_finite() && self.z.is_finite() && self.iob.is_finite() && self.glucose.is_finite()
    }

    pub(crate) fn axpy(&self, h: f64, d: &StateDerivative) -> Self {
        Self {
            y: self.y + h * d.dy,
            z: self.z + h * d.dz,
            iob: self.iob + h * d.diob,
            glucose: self.glucose + h * d.dglucose,
        }
    }
}

/// Parameters of the minimal glucose extension.
///
/// `dG = -p_g (G - g_b) - s_i iob G + Ra(t)` with meal appearance
/// `Ra(t) = carb_gain * carbs * k_abs * exp(-k_abs (t - t_meal))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlucoseParams {
    /// Glucose effectiveness (1/min).
    pub p_g: f64,
    /// Insulin action on glucose uptake (1/min per IOB unit).
    pub s_i: f64,
    /// Basal glucose (mg/dl).
    pub g_b: f64,
    /// Meal absorption rate (1/min).
    pub k_abs: f64,
    /// Total glucose rise per gram of carbohydrate (mg/dl/g).
    pub carb_gain: f64,
}

/// Reference glucose at which the nominal insulin sensitivity factor is quoted.
pub const ISF_REFERENCE_GLUCOSE: f64 = 110.0;

impl GlucoseParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        for (name, value) in [
            ("p_g", self.p_g),
            ("s_i", self.s_i),
            ("g_b", self.g_b),
            ("k_abs", self.k_abs),
            ("carb_gain", self.carb_gain),
        ] {
            if !value.is_finite() || value <= 0.0 {
                return Err(DynamicsError::InvalidGlucoseParam { name, value });
            }
        }
        Ok(())
    }

    /// Build glucose parameters for a patient whose nominal sensitivity is
    /// `isf` mg/dl per unit and whose correct carb ratio is `cr` g/U, resting
    /// at `target` mg/dl under `basal_rate` U/min.
    ///
    /// `s_i` is chosen so that one unit delivered through the insulin model
    /// removes `isf` mg/dl at the reference glucose (ignoring glucose
    /// effectiveness), `carb_gain = isf / cr` and `g_b` puts the basal
    /// equilibrium at `target`.
    pub fn calibrated(
        coeffs: &Coefficients,
        isf: f64,
        cr: f64,
        basal_rate: f64,
        target: f64,
        p_g: f64,
        k_abs: f64,
    ) -> Result<Self, DynamicsError> {
        coeffs.validate()?;
        // integral of excess iob per unit dose is p1/n
        let exposure_per_unit = coeffs.p1 / coeffs.n;
        let s_i = isf / (ISF_REFERENCE_GLUCOSE * exposure_per_unit);
        let iob_basal = coeffs.steady_iob(basal_rate);
        let g_b = target + s_i * iob_basal * target / p_g;
        let gp = Self {
            p_g,
            s_i,
            g_b,
            k_abs,
            carb_gain: isf / cr,
        };
        gp.validate()?;
        Ok(gp)
    }

    /// Default virtual patient: ISF 40 mg/dl/U, CR 5 g/U, 1 U/h basal, resting at 90 mg/dl.
    pub fn virtual_patient() -> Self {
        Self::calibrated(
            &Coefficients::virtual_patient(),
            40.0,
            5.0,
            1.0 / 60.0,
            90.0,
            0.01,
            0.03,
        )
        .expect("default glucose parameters are valid")
    }

    /// Same patient with carbohydrate sensitivity matched to carb ratio `cr`.
    pub fn with_carb_ratio(&self, isf: f64, cr: f64) -> Self {
        Self {
            carb_gain: isf / cr,
            ..*self
        }
    }

    /// Meal rate of appearance at `t` for a meal of `carbs` grams eaten at `t_meal`.
    pub fn meal_appearance(&self, carbs: f64, t_meal: f64, t: f64) -> f64 {
        if t < t_meal {
            return 0.0;
        }
        self.carb_gain * carbs * self.k_abs * (-self.k_abs * (t - t_meal)).exp()
    }
}

/// Time derivative of the joint plant state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateDerivative {
    pub dy: f64,
    pub dz: f64,
    pub diob: f64,
    pub dglucose: f64,
}

/// Insulin subsystem right-hand side. `dglucose` is left at zero.
pub fn bmm_derivative(state: &PlantState, coeffs: &Coefficients, u_ex: f64) -> StateDerivative {
    let k1 = coeffs.k1;
    StateDerivative {
        dy: state.z,
        dz: -2.0 * k1 * state.z - k1 * k1 * state.y + k1 * k1 * u_ex,
        diob: -coeffs.n * state.iob + coeffs.p1 * (state.y + coeffs.i_b),
        dglucose: 0.0,
    }
}

pub fn glucose_derivative(state: &PlantState, gp: &GlucoseParams, meal_appearance: f64) -> f64 {
    -gp.p_g * (state.glucose - gp.g_b) - gp.s_i * state.iob * state.glucose + meal_appearance
}

pub fn plant_derivative(
    state: &PlantState,
    coeffs: &Coefficients,
    gp: &GlucoseParams,
    insulin_rate: f64,
    meal_appearance: f64,
) -> StateDerivative {
    let mut d = bmm_derivative(state, coeffs, insulin_rate);
    d.dglucose = glucose_derivative(state, gp, meal_appearance);
    d
}

/// Zero-state response of `(y, z)` to a constant input `u_step` switched on at `t = 0`.
///
/// The insulin subsystem is critically damped with a double pole at `-k1`.
pub fn closed_form_insulin(coeffs: &Coefficients, u_step: f64, t: f64) -> (f64, f64) {
    let k1 = coeffs.k1;
    let decay = (-k1 * t).exp();
    let y = u_step * (1.0 - (1.0 + k1 * t) * decay);
    let z = u_step * k1 * k1 * t * decay;
    (y, z)
}

/// Insulin still to act, in units, for a state measured against the resting
/// state of a constant `basal_rate`.
///
/// Integrates the remaining excess IOB of the unforced response and divides
/// by the exposure of a single unit (`p1 / n`). Right after a bolus of `D`
/// units has been absorbed into the depot this equals `D`.
pub fn insulin_remaining(state: &PlantState, coeffs: &Coefficients, basal_rate: f64) -> f64 {
    let rest = PlantState::insulin_steady_state(coeffs, basal_rate, state.glucose);
    let y_e = state.y - rest.y;
    let z_e = state.z - rest.z;
    let iob_e = state.iob - rest.iob;
    let k1 = coeffs.k1;
    let depot = (z_e + 2.0 * k1 * y_e) / (k1 * k1);
    if coeffs.p1 > 0.0 {
        iob_e / coeffs.p1 + depot
    } else {
        depot
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn equilibrium_at_origin() {
        let c = Coefficients::new(0.05, 0.1, 0.02, 0.0).unwrap();
        let d = bmm_derivative(&PlantState::new(0.0, 0.0, 0.0, 100.0), &c, 0.0);
        assert_eq!((d.dy, d.dz, d.diob), (0.0, 0.0, 0.0));
    }

    #[test]
    fn iob_clearance_rate() {
        let c = Coefficients::new(0.05, 0.1406, 0.0, 0.0).unwrap();
        let d = bmm_derivative(&PlantState::new(0.0, 0.0, 1.0, 100.0), &c, 0.0);
        assert_abs_diff_eq!(d.diob, -0.1406, epsilon = 1e-15);
    }

    #[test]
    fn steady_state_is_fixed_point() {
        let c = Coefficients::new(0.07, 0.12, 0.03, 0.4).unwrap();
        let u = 1.7;
        let s = PlantState::insulin_steady_state(&c, u, 100.0);
        let d = bmm_derivative(&s, &c, u);
        assert_abs_diff_eq!(d.dy, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.dz, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.diob, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn glucose_rates() {
        let gp = GlucoseParams {
            p_g: 0.01,
            s_i: 0.001,
            g_b: 100.0,
            k_abs: 0.03,
            carb_gain: 3.0,
        };
        let at_basal = PlantState::new(0.0, 0.0, 0.0, 100.0);
        assert_eq!(glucose_derivative(&at_basal, &gp, 0.0), 0.0);
        let with_iob = PlantState::new(0.0, 0.0, 2.0, 100.0);
        assert_abs_diff_eq!(
            glucose_derivative(&with_iob, &gp, 0.0),
            -0.2,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            glucose_derivative(&at_basal, &gp, 0.5),
            0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn closed_form_values() {
        let c = Coefficients::new(0.1, 0.1, 0.01, 0.0).unwrap();
        assert_eq!(closed_form_insulin(&c, 1.0, 0.0), (0.0, 0.0));
        let (y, z) = closed_form_insulin(&c, 1.0, 10.0);
        assert_abs_diff_eq!(y, 0.26424, epsilon = 1e-5);
        assert_abs_diff_eq!(z, 0.036788, epsilon = 1e-6);
        let (y, z) = closed_form_insulin(&c, 1.0, 1e4);
        assert_abs_diff_eq!(y, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_coefficients() {
        assert!(Coefficients::new(0.0, 0.1, 0.01, 0.0).is_err());
        assert!(Coefficients::new(0.1, -0.1, 0.01, 0.0).is_err());
        assert!(Coefficients::new(0.1, 0.1, f64::NAN, 0.0).is_err());
        assert!(Coefficients::new(0.1, 0.1, 0.0, 0.0).is_ok());
    }

    #[test]
    fn ranges() {
        let r = CoefficientRanges::default();
        assert!(r.contains(&Coefficients::virtual_patient()));
        let c = Coefficients::new(0.5, 0.1, 0.01, 0.0).unwrap();
        assert!(matches!(
            r.check(&c),
            Err(DynamicsError::OutOfRange { name: "k1", .. })
        ));
    }

    #[test]
    fn calibrated_patient_rests_at_target() {
        let c = Coefficients::virtual_patient();
        let gp = GlucoseParams::virtual_patient();
        let s = PlantState::insulin_steady_state(&c, 1.0 / 60.0, 90.0);
        assert_abs_diff_eq!(glucose_derivative(&s, &gp, 0.0), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn remaining_insulin_of_fresh_bolus() {
        let c = Coefficients::virtual_patient();
        let basal = 1.0 / 60.0;
        let mut s = PlantState::insulin_steady_state(&c, basal, 90.0);
        // an impulse of D units lands in z as k1^2 * D
        s.z += c.k1 * c.k1 * 2.0;
        assert_abs_diff_eq!(insulin_remaining(&s, &c, basal), 2.0, epsilon = 1e-12);
    }
}
