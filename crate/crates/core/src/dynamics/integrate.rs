use serde::{Deserialize, Serialize};

use super::model::{plant_derivative, Coefficients, GlucoseParams, PlantState};
use super::trace::{Sample, Trace};
use super::DynamicsError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bolus {
    /// min
    pub time: f64,
    /// U
    pub dose: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasalSegment {
    /// min; the rate holds until the next segment starts
    pub start: f64,
    /// U/min
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Meal {
    /// min
    pub time: f64,
    /// g
    pub carbs: f64,
}

/// External inputs `u_ex`: bolus impulses, scheduled basal and meals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InputSchedule {
    #[serde(default)]
    pub boluses: Vec<Bolus>,
    #[serde(default)]
    pub basal: Vec<BasalSegment>,
    #[serde(default)]
    pub meals: Vec<Meal>,
}

fn check_sorted(name: &str, times: impl Iterator<Item = f64>) -> Result<(), DynamicsError> {
    let mut prev = f64::NEG_INFINITY;
    for t in times {
        if !t.is_finite() || t < prev {
            return Err(DynamicsError::InvalidSchedule(format!(
                "{name} times must be finite and nondecreasing (got {t} after {prev})"
            )));
        }
        prev = t;
    }
    Ok(())
}

fn check_nonneg(name: &str, values: impl Iterator<Item = f64>) -> Result<(), DynamicsError> {
    for v in values {
        if !v.is_finite() || v < 0.0 {
            return Err(DynamicsError::InvalidSchedule(format!(
                "{name} must be finite and >= 0 (got {v})"
            )));
        }
    }
    Ok(())
}

impl InputSchedule {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        check_sorted("bolus", self.boluses.iter().map(|b| b.time))?;
        check_sorted("basal", self.basal.iter().map(|b| b.start))?;
        check_sorted("meal", self.meals.iter().map(|m| m.time))?;
        check_nonneg("bolus dose", self.boluses.iter().map(|b| b.dose))?;
        check_nonneg("basal rate", self.basal.iter().map(|b| b.rate))?;
        check_nonneg("meal carbs", self.meals.iter().map(|m| m.carbs))?;
        Ok(())
    }

    pub fn with_bolus(mut self, time: f64, dose: f64) -> Self {
        self.boluses.push(Bolus { time, dose });
        self.boluses.sort_by(|a, b| a.time.total_cmp(&b.time));
        self
    }

    pub fn with_meal(mut self, time: f64, carbs: f64) -> Self {
        self.meals.push(Meal { time, carbs });
        self.meals.sort_by(|a, b| a.time.total_cmp(&b.time));
        self
    }

    pub fn with_basal(mut self, start: f64, rate: f64) -> Self {
        self.basal.push(BasalSegment { start, rate });
        self.basal.sort_by(|a, b| a.start.total_cmp(&b.start));
        self
    }

    /// Mean scheduled insulin rate over `[a, b)`, with each bolus spread as a
    /// rectangular pulse of `bolus_width` minutes.
    pub fn mean_insulin_rate(&self, a: f64, b: f64, bolus_width: f64) -> f64 {
        let h = b - a;
        let overlap = |lo: f64, hi: f64| (hi.min(b) - lo.max(a)).max(0.0);
        let mut amount = 0.0;
        for bolus in &self.boluses {
            amount += bolus.dose * overlap(bolus.time, bolus.time + bolus_width) / bolus_width;
        }
        for (i, seg) in self.basal.iter().enumerate() {
            let end = self
                .basal
                .get(i + 1)
                .map_or(f64::INFINITY, |next| next.start);
            amount += seg.rate * overlap(seg.start, end);
        }
        amount / h
    }

    pub fn meal_appearance(&self, gp: &GlucoseParams, t: f64) -> f64 {
        self.meals
            .iter()
            .map(|m| gp.meal_appearance(m.carbs, m.time, t))
            .sum()
    }
}

/// Set-point trajectory: an initial value plus timed changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetPointSchedule {
    pub initial: f64,
    #[serde(default)]
    pub changes: Vec<(f64, f64)>,
}

impl SetPointSchedule {
    pub fn constant(value: f64) -> Self {
        Self {
            initial: value,
            changes: Vec::new(),
        }
    }

    pub fn value_at(&self, t: f64) -> f64 {
        self.changes
            .iter()
            .take_while(|(at, _)| *at <= t + 1e-9)
            .last()
            .map_or(self.initial, |&(_, s)| s)
    }
}

/// A feedback controller `pi(X, s)` returning an insulin rate in U/min.
pub trait Controller: Send + Sync {
    fn rate(&self, state: &PlantState, set_point: f64) -> f64;
}

/// Controller that never delivers anything.
#[derive(Debug, Clone, Copy, Default)]
pub struct ControllerOff;

impl Controller for ControllerOff {
    fn rate(&self, _state: &PlantState, _set_point: f64) -> f64 {
        0.0
    }
}

/// Controller plus the set-point trajectory it runs against.
pub struct ControlLoop<'a> {
    pub controller: &'a dyn Controller,
    pub set_points: SetPointSchedule,
}

impl ControlLoop<'static> {
    pub fn open() -> Self {
        ControlLoop {
            controller: &ControllerOff,
            set_points: SetPointSchedule::constant(0.0),
        }
    }
}

impl<'a> ControlLoop<'a> {
    pub fn new(controller: &'a dyn Controller, set_points: SetPointSchedule) -> Self {
        Self {
            controller,
            set_points,
        }
    }
}

/// Plant description: insulin coefficients plus glucose extension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    pub coeffs: Coefficients,
    pub glucose: GlucoseParams,
}

impl Plant {
    pub fn virtual_patient() -> Self {
        Self {
            coeffs: Coefficients::virtual_patient(),
            glucose: GlucoseParams::virtual_patient(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Step and sampling period (min).
    pub dt: f64,
    pub max_dt: f64,
    /// Width of the rectangular pulse a bolus is spread over (min).
    pub bolus_width: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1.0,
            max_dt: 1.0,
            bolus_width: 1.0,
        }
    }
}

impl SimConfig {
    pub fn with_dt(dt: f64) -> Self {
        Self {
            dt,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.dt.is_finite() && self.dt > 0.0 && self.dt <= self.max_dt) {
            return Err(DynamicsError::InvalidStep(self.dt));
        }
        if !(self.bolus_width.is_finite() && self.bolus_width > 0.0) {
            return Err(DynamicsError::InvalidSchedule(format!(
                "bolus width must be positive (got {})",
                self.bolus_width
            )));
        }
        Ok(())
    }
}

/// One classical Runge-Kutta step of the joint insulin/glucose system.
///
/// The insulin rate is held over the step; meal appearance is evaluated at
/// the stage times through `meal`.
pub fn rk4_step(
    state: &PlantState,
    plant: &Plant,
    insulin_rate: f64,
    meal: impl Fn(f64) -> f64,
    t: f64,
    dt: f64,
) -> Result<PlantState, DynamicsError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(DynamicsError::InvalidStep(dt));
    }
    if !state.is_finite() || !insulin_rate.is_finite() {
        return Err(DynamicsError::NonFinite { t });
    }
    let f = |s: &PlantState, tau: f64| {
        plant_derivative(s, &plant.coeffs, &plant.glucose, insulin_rate, meal(tau))
    };
    let half = 0.5 * dt;
    let k1 = f(state, t);
    let k2 = f(&state.axpy(half, &k1), t + half);
    let k3 = f(&state.axpy(half, &k2), t + half);
    let k4 = f(&state.axpy(dt, &k3), t + dt);
    let w = dt / 6.0;
    let next = PlantState {
        y: state.y + w * (k1.dy + 2.0 * k2.dy + 2.0 * k3.dy + k4.dy),
        z: state.z + w * (k1.dz + 2.0 * k2.dz + 2.0 * k3.dz + k4.dz),
        iob: state.iob + w * (k1.diob + 2.0 * k2.diob + 2.0 * k3.diob + k4.diob),
        glucose: state.glucose
            + w * (k1.dglucose + 2.0 * k2.dglucose + 2.0 * k3.dglucose + k4.dglucose),
    };
    if !next.is_finite() {
        return Err(DynamicsError::NonFinite { t: t + dt });
    }
    Ok(next)
}

/// Forward-simulate the plant from `t0` for `horizon` minutes.
///
/// At every step the applied rate is the controller output on the sampled
/// state plus the mean scheduled rate over the step. The trace holds
/// `ceil(horizon / dt) + 1` samples; each records the rate applied from that
/// sample onwards and the active set point.
pub fn simulate(
    initial: &PlantState,
    plant: &Plant,
    schedule: &InputSchedule,
    control: &ControlLoop<'_>,
    t0: f64,
    horizon: f64,
    config: &SimConfig,
) -> Result<Trace, DynamicsError> {
    plant.coeffs.validate()?;
    plant.glucose.validate()?;
    schedule.validate()?;
    config.validate()?;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(DynamicsError::InvalidHorizon(horizon));
    }
    if !initial.is_finite() {
        return Err(DynamicsError::NonFinite { t: t0 });
    }
    let dt = config.dt;
    let steps = (horizon / dt - 1e-9).ceil() as usize;
    let meal = |tau: f64| schedule.meal_appearance(&plant.glucose, tau);
    let applied = |state: &PlantState, t: f64| {
        let s = control.set_points.value_at(t);
        let u = control.controller.rate(state, s)
            + schedule.mean_insulin_rate(t, t + dt, config.bolus_width);
        (u, s)
    };

    let mut samples = Vec::with_capacity(steps + 1);
    let mut state = *initial;
    for i in 0..steps {
        let t = t0 + i as f64 * dt;
        let (u, s) = applied(&state, t);
        samples.push(Sample { state, u, s });
        state = rk4_step(&state, plant, u, meal, t, dt)?;
    }
    let t_end = t0 + steps as f64 * dt;
    let (u, s) = applied(&state, t_end);
    samples.push(Sample { state, u, s });
    Trace::new(t0, dt, samples)
}

/// Unforced insulin response sampled every `dt`; used by the decoder and the dataset generators.
pub fn simulate_insulin(
    initial: &PlantState,
    coeffs: &Coefficients,
    horizon: f64,
    dt: f64,
) -> Result<Trace, DynamicsError> {
    let plant = Plant {
        coeffs: *coeffs,
        glucose: GlucoseParams {
            p_g: 1.0,
            s_i: f64::MIN_POSITIVE,
            g_b: initial.glucose.max(1.0),
            k_abs: 1.0,
            carb_gain: 1.0,
        },
    };
    let config = SimConfig {
        dt,
        max_dt: dt.max(1.0),
        bolus_width: 1.0,
    };
    simulate(
        initial,
        &plant,
        &InputSchedule::default(),
        &ControlLoop::open(),
        0.0,
        horizon,
        &config,
    )
}

#[cfg(test)]
mod tests {
    use super::super::model::closed_form_insulin;
    use super::*;
    use approx::assert_abs_diff_eq;

    fn plant(k1: f64, n: f64, p1: f64, i_b: f64) -> Plant {
        Plant {
            coeffs: Coefficients::new(k1, n, p1, i_b).unwrap(),
            glucose: GlucoseParams::virtual_patient(),
        }
    }

    #[test]
    fn steady_state_is_preserved() {
        let p = plant(0.08, 0.12, 0.03, 0.5);
        let u = 0.4;
        let mut s = PlantState::insulin_steady_state(&p.coeffs, u, 100.0);
        s.glucose = 100.0;
        let next = rk4_step(&s, &p, u, |_| 0.0, 0.0, 1.0).unwrap();
        assert!((next.y - s.y).abs() < 1e-12);
        assert!((next.z - s.z).abs() < 1e-12);
        assert!((next.iob - s.iob).abs() < 1e-12);
    }

    #[test]
    fn step_response_matches_closed_form() {
        let p = plant(0.1, 0.1, 0.0, 0.0);
        let schedule = InputSchedule::default().with_basal(0.0, 1.0);
        let init = PlantState::new(0.0, 0.0, 0.0, 90.0);
        let trace = simulate(
            &init,
            &p,
            &schedule,
            &ControlLoop::open(),
            0.0,
            10.0,
            &SimConfig::with_dt(0.1),
        )
        .unwrap();
        let last = trace.last().state;
        assert_abs_diff_eq!(last.y, 1.0 - 2.0 * (-1.0f64).exp(), epsilon = 1e-6);
        assert_abs_diff_eq!(last.y, 0.26424, epsilon = 1e-5);
        let (y, z) = closed_form_insulin(&p.coeffs, 1.0, 10.0);
        assert_abs_diff_eq!(last.y, y, epsilon = 1e-7);
        assert_abs_diff_eq!(last.z, z, epsilon = 1e-7);
    }

    #[test]
    fn iob_decay_matches_exponential() {
        let c = Coefficients::new(0.05, 0.1406, 0.01, 0.0).unwrap();
        let trace =
            simulate_insulin(&PlantState::new(0.0, 0.0, 1.0, 100.0), &c, 10.0, 0.1).unwrap();
        assert_abs_diff_eq!(trace.last().state.iob, (-1.406f64).exp(), epsilon = 1e-5);
        assert_abs_diff_eq!(trace.last().state.iob, 0.24512, epsilon = 1e-5);
    }

    #[test]
    fn trace_length_rounds_up() {
        let c = Coefficients::virtual_patient();
        let init = PlantState::new(0.0, 0.0, 1.0, 100.0);
        assert_eq!(simulate_insulin(&init, &c, 10.0, 1.0).unwrap().len(), 11);
        assert_eq!(simulate_insulin(&init, &c, 10.5, 1.0).unwrap().len(), 12);
        assert_eq!(simulate_insulin(&init, &c, 1.0, 0.25).unwrap().len(), 5);
    }

    #[test]
    fn equilibrium_trace_is_constant() {
        let p = Plant::virtual_patient();
        let basal = 1.0 / 60.0;
        let init = PlantState::insulin_steady_state(&p.coeffs, basal, 90.0);
        let schedule = InputSchedule::default().with_basal(0.0, basal);
        let trace = simulate(
            &init,
            &p,
            &schedule,
            &ControlLoop::open(),
            0.0,
            300.0,
            &SimConfig::default(),
        )
        .unwrap();
        for s in trace.samples() {
            assert!((s.state.y - init.y).abs() < 1e-12);
            assert!((s.state.iob - init.iob).abs() < 1e-12);
            assert!((s.state.glucose - 90.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bolus_pulse_conserves_dose() {
        let s = InputSchedule::default().with_bolus(3.0, 6.0);
        let total: f64 = (0..20)
            .map(|i| s.mean_insulin_rate(i as f64 * 0.25, (i + 1) as f64 * 0.25, 1.0) * 0.25)
            .sum();
        assert_abs_diff_eq!(total, 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.mean_insulin_rate(3.0, 4.0, 1.0), 6.0, epsilon = 1e-12);
        assert_eq!(s.mean_insulin_rate(4.0, 5.0, 1.0), 0.0);
    }

    #[test]
    fn rejects_bad_steps_and_blowup() {
        let p = Plant::virtual_patient();
        let s = PlantState::new(0.0, 0.0, 0.0, 90.0);
        assert!(matches!(
            rk4_step(&s, &p, 0.0, |_| 0.0, 0.0, 0.0),
            Err(DynamicsError::InvalidStep(_))
        ));
        assert!(matches!(
            rk4_step(&s, &p, 0.0, |_| 0.0, 0.0, -1.0),
            Err(DynamicsError::InvalidStep(_))
        ));
        let bad = PlantState::new(f64::NAN, 0.0, 0.0, 90.0);
        assert!(
            matches!(rk4_step(&bad, &p, 0.0, |_| 0.0, 5.0, 1.0), Err(DynamicsError::NonFinite { t }) if t == 5.0)
        );
        let cfg = SimConfig::with_dt(2.0);
        let r = simulate(
            &s,
            &p,
            &InputSchedule::default(),
            &ControlLoop::open(),
            0.0,
            10.0,
            &cfg,
        );
        assert!(matches!(r, Err(DynamicsError::InvalidStep(_))));
    }

    #[test]
    fn blowup_reports_time() {
        // a huge clearance rate makes the explicit scheme diverge
        let p = plant(0.1, 1e3, 0.1, 1.0);
        let s = PlantState::new(1.0, 0.0, 1.0, 90.0);
        let r = simulate(
            &s,
            &p,
            &InputSchedule::default(),
            &ControlLoop::open(),
            0.0,
            500.0,
            &SimConfig::default(),
        );
        match r {
            Err(DynamicsError::NonFinite { t }) => assert!(t > 0.0 && t <= 500.0),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn set_point_schedule_lookup() {
        let s = SetPointSchedule {
            initial: 90.0,
            changes: vec![(0.0, 110.0), (120.0, 90.0)],
        };
        assert_eq!(s.value_at(-1.0), 90.0);
        assert_eq!(s.value_at(0.0), 110.0);
        assert_eq!(s.value_at(119.0), 110.0);
        assert_eq!(s.value_at(120.0), 90.0);
    }

    #[test]
    fn schedule_validation() {
        let bad = InputSchedule {
            boluses: vec![
                Bolus {
                    time: 5.0,
                    dose: 1.0,
                },
                Bolus {
                    time: 1.0,
                    dose: 1.0,
                },
            ],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let neg = InputSchedule::default().with_meal(0.0, -3.0);
        assert!(neg.validate().is_err());
    }
}
