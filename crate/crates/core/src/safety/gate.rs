use serde::{Deserialize, Serialize};

use super::SafetyError;
use crate::dynamics::{
    simulate, Coefficients, ControlLoop, GlucoseParams, InputSchedule, Meal, Plant, PlantState,
    SimConfig, Trace,
};
use crate::planner::{ControllerConfig, UsagePlan};
use crate::stl::{
    ada_report, robustness, robustness_signal, Robustness, StlFormula, ADA_TBR_LIMIT,
};

/// Simulated patient: insulin coefficients plus glucose calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VirtualPatient {
    pub coeffs: Coefficients,
    /// mg/dl per U at 110 mg/dl
    pub isf: f64,
    /// 1/min
    pub p_g: f64,
    /// 1/min
    pub k_abs: f64,
    /// Resting glucose under basal delivery (mg/dl).
    pub target: f64,
}

impl Default for VirtualPatient {
    fn default() -> Self {
        Self {
            coeffs: Coefficients::virtual_patient(),
            isf: 40.0,
            p_g: 0.01,
            k_abs: 0.03,
            target: 90.0,
        }
    }
}

impl VirtualPatient {
    pub fn with_coeffs(self, coeffs: Coefficients) -> Self {
        Self { coeffs, ..self }
    }

    /// Plant whose carbohydrate response matches the carb ratio `cr`.
    pub fn plant(&self, cr: f64, basal_rate: f64) -> Result<Plant, SafetyError> {
        let glucose = GlucoseParams::calibrated(
            &self.coeffs,
            self.isf,
            cr,
            basal_rate,
            self.target,
            self.p_g,
            self.k_abs,
        )?;
        Ok(Plant {
            coeffs: self.coeffs,
            glucose,
        })
    }

    pub fn rest_state(&self, basal_rate: f64) -> PlantState {
        PlantState::insulin_steady_state(&self.coeffs, basal_rate, self.target)
    }
}

/// State after `units` of insulin have just been injected into the depot.
pub fn with_fresh_insulin(state: &PlantState, coeffs: &Coefficients, units: f64) -> PlantState {
    PlantState {
        z: state.z + coeffs.k1 * coeffs.k1 * units,
        ..*state
    }
}

/// Simulate a plan over `[0, horizon]`: plan boluses become pulses, plan
/// set points drive the controller.
pub fn forward_simulate(
    plan: &UsagePlan,
    plant: &Plant,
    initial: &PlantState,
    controller: &ControllerConfig,
    meals: &[Meal],
    horizon: f64,
    sim: &SimConfig,
) -> Result<Trace, SafetyError> {
    plan.validate(horizon)?;
    controller.validate()?;
    let mut schedule = InputSchedule {
        boluses: plan.bolus_inputs(),
        ..InputSchedule::default()
    };
    for m in meals {
        schedule = schedule.with_meal(m.time, m.carbs);
    }
    let pi = controller.controller();
    let control = ControlLoop::new(&pi, plan.set_point_schedule(controller.set_point));
    Ok(simulate(
        initial, plant, &schedule, &control, 0.0, horizon, sim,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Safe,
    Unsafe,
}

/// Property a predicted trace must satisfy for a plan to execute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SafetyCriterion {
    /// `G (TBR < 4%)` with the given sliding window; `None` is the whole trace.
    Ada { window: Option<f64> },
    /// Arbitrary formula, evaluated at the first sample.
    Formula { formula: StlFormula },
}

impl Default for SafetyCriterion {
    fn default() -> Self {
        SafetyCriterion::Ada { window: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub verdict: Verdict,
    pub robustness: Robustness,
    pub first_violation: Option<f64>,
    /// Present iff the verdict is Unsafe.
    pub feedback: Option<String>,
}

/// Accept (`rho >= 0`) or reject the predicted trace.
pub fn gate(predicted: &Trace, criterion: &SafetyCriterion) -> Result<GateOutcome, SafetyError> {
    let (rob, first_violation, describe) = match criterion {
        SafetyCriterion::Ada { window } => {
            let r = ada_report(predicted, *window)?;
            let window_text = match window {
                None => "over the whole horizon".to_string(),
                Some(w) => format!("in a {w}-min window"),
            };
            let detail = format!(
                "time below 70 mg/dl reaches {:.1}% {window_text} (limit {:.0}%)",
                100.0 * r.worst_tbr,
                100.0 * ADA_TBR_LIMIT
            );
            (
                r.robustness,
                r.first_violation,
                ("G(TBR < 4%)".to_string(), detail),
            )
        }
        SafetyCriterion::Formula { formula } => {
            let r = robustness(formula, predicted, predicted.t0())?;
            let first = first_violation_of(formula, predicted)?;
            (r, first, (formula.to_string(), String::new()))
        }
    };
    let verdict = if rob.is_satisfied() {
        Verdict::Safe
    } else {
        Verdict::Unsafe
    };
    let feedback = (verdict == Verdict::Unsafe).then(|| {
        let (name, detail) = &describe;
        let mut text = format!("Unsafe plan: {name} is violated (rho = {:.4})", rob.rho);
        if let Some(t) = first_violation {
            text.push_str(&format!(", first at t = {t} min"));
        }
        if !detail.is_empty() {
            text.push_str("; ");
            text.push_str(detail);
        }
        text.push_str(
            ". The plan risks hypoglycemia; lower the bolus or raise the set point and re-check.",
        );
        text
    });
    Ok(GateOutcome {
        verdict,
        robustness: rob,
        first_violation,
        feedback,
    })
}

fn first_violation_of(formula: &StlFormula, trace: &Trace) -> Result<Option<f64>, SafetyError> {
    if let StlFormula::Globally { a, body, .. } = formula {
        let sig = robustness_signal(body, trace)?;
        let skip = (a / trace.dt()).ceil() as usize;
        return Ok(sig
            .iter()
            .enumerate()
            .skip(skip)
            .find(|(_, r)| **r < 0.0)
            .map(|(i, _)| trace.time_at(i)));
    }
    let r = robustness(formula, trace, trace.t0())?;
    Ok((r.rho < 0.0).then_some(trace.t0()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{PlannedBolus, SetPointChange};

    fn cgm(values: &[f64]) -> Trace {
        Trace::from_glucose(0.0, 5.0, values).unwrap()
    }

    #[test]
    fn gate_examples() {
        let safe = gate(&cgm(&[100.0; 100]), &SafetyCriterion::default()).unwrap();
        assert_eq!((safe.verdict, safe.robustness.rho), (Verdict::Safe, 0.04));
        assert!(safe.feedback.is_none());

        let mut v = vec![100.0; 100];
        v[30..40].fill(60.0);
        let bad = gate(&cgm(&v), &SafetyCriterion::default()).unwrap();
        assert_eq!(bad.verdict, Verdict::Unsafe);
        assert!((bad.robustness.rho + 0.06).abs() < 1e-12);
        assert!(bad.feedback.as_ref().unwrap().contains("TBR"));

        v[34..40].fill(100.0);
        let edge = gate(&cgm(&v), &SafetyCriterion::default()).unwrap();
        assert_eq!((edge.verdict, edge.robustness.rho), (Verdict::Safe, 0.0));
    }

    #[test]
    fn formula_criterion_reports_first_violation() {
        let mut v = vec![100.0; 20];
        v[7] = 65.0;
        let f = StlFormula::parse("(G 0 95 (> cgm 70))").unwrap();
        let out = gate(&cgm(&v), &SafetyCriterion::Formula { formula: f }).unwrap();
        assert_eq!(out.verdict, Verdict::Unsafe);
        assert_eq!(out.first_violation, Some(35.0));
    }

    #[test]
    fn empty_plan_from_rest_is_constant() {
        let vp = VirtualPatient::default();
        let cfg = ControllerConfig::default();
        let plant = vp.plant(cfg.cr, cfg.basal_rate).unwrap();
        let rest = vp.rest_state(cfg.basal_rate);
        let tr = forward_simulate(
            &UsagePlan::empty(),
            &plant,
            &rest,
            &cfg,
            &[],
            240.0,
            &SimConfig::default(),
        )
        .unwrap();
        for s in tr.samples() {
            assert!((s.state.glucose - 90.0).abs() < 1e-9);
        }
    }

    #[test]
    fn set_point_raise_lowers_first_rate() {
        let vp = VirtualPatient::default();
        let cfg = ControllerConfig::default();
        let plant = vp.plant(cfg.cr, cfg.basal_rate).unwrap();
        let rest = vp.rest_state(cfg.basal_rate);
        let sim = SimConfig::default();
        let base =
            forward_simulate(&UsagePlan::empty(), &plant, &rest, &cfg, &[], 60.0, &sim).unwrap();
        let raised = UsagePlan {
            setpoints: vec![SetPointChange {
                t_min: 0.0,
                mgdl: 110.0,
            }],
            ..Default::default()
        };
        let up = forward_simulate(&raised, &plant, &rest, &cfg, &[], 60.0, &sim).unwrap();
        assert!(up.samples()[0].u < base.samples()[0].u);
        assert_eq!(up.samples()[0].s, 110.0);
    }

    #[test]
    fn bigger_bolus_lower_minimum() {
        let vp = VirtualPatient::default();
        let cfg = ControllerConfig::default().with_cr(5.0);
        let plant = vp.plant(cfg.cr, cfg.basal_rate).unwrap();
        let rest = vp.rest_state(cfg.basal_rate);
        let meal = [Meal {
            time: 0.0,
            carbs: 45.0,
        }];
        let min_for = |units: f64| {
            let plan = UsagePlan {
                boluses: vec![PlannedBolus { t_min: 0.0, units }],
                ..Default::default()
            };
            let tr = forward_simulate(
                &plan,
                &plant,
                &rest,
                &cfg,
                &meal,
                360.0,
                &SimConfig::default(),
            )
            .unwrap();
            tr.glucose().into_iter().fold(f64::INFINITY, f64::min)
        };
        assert!(min_for(11.0) < min_for(7.0));
    }
}
