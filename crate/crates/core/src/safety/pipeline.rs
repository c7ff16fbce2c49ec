use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::gate::{
    forward_simulate, gate, with_fresh_insulin, SafetyCriterion, Verdict, VirtualPatient,
};
use crate::dynamics::{insulin_remaining, Bolus, Coefficients, Meal, PlantState, SimConfig, Trace};
use crate::estimator::EstimatorNetwork;
use crate::llm::{
    format_bolus_prompt, format_forward_prompt, parse_dose_response, parse_series_response,
    Responder, SeriesSpec,
};
use crate::planner::{
    build_meal_plan_with, BolusFormula, ControllerConfig, IobEstimator, MealEvent, PlanMode,
    PlanProvenance, UsagePlan,
};
use crate::provenance::config_hash;
use crate::stl::Robustness;

/// Everything one advising round needs. Times are minutes relative to the
/// end of the context trace (`t0 = context.t_end()`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    #[serde(default)]
    pub query: String,
    pub context: Trace,
    #[serde(default)]
    pub meal: Option<MealEvent>,
    /// t_f (min)
    pub horizon: f64,
    /// t_h (min)
    pub past_horizon: f64,
    /// Pump settings, including the carb ratio.
    #[serde(default)]
    pub controller: ControllerConfig,
    /// Insulin on board (U) reported by the user. Replaces the model's
    /// estimate both in the bolus formula and in the simulated start state.
    #[serde(default)]
    pub iob_override: Option<f64>,
    /// Logged boluses, relative to `t0`; read by the linear-IOB planner.
    #[serde(default)]
    pub doses: Vec<Bolus>,
    /// IOB samples recorded under the estimator's protocol. When absent the
    /// context trace's IOB channel is used.
    #[serde(default)]
    pub calibration: Option<Trace>,
    #[serde(default)]
    pub criterion: SafetyCriterion,
    #[serde(default)]
    pub sim: SimConfig,
}

impl PlanRequest {
    /// Request with a resting context of `past_horizon` minutes.
    pub fn at_rest(
        patient: &VirtualPatient,
        controller: ControllerConfig,
        meal: Option<MealEvent>,
        horizon: f64,
        past_horizon: f64,
    ) -> Result<Self, PipelineError> {
        let rest = patient.rest_state(controller.basal_rate);
        let n = (past_horizon.max(0.0)).round() as usize + 1;
        let sample = crate::dynamics::Sample {
            state: rest,
            u: controller.basal_rate,
            s: controller.set_point,
        };
        let context = Trace::new(-(n as f64 - 1.0), 1.0, vec![sample; n])
            .map_err(|e| PipelineError::at(PipelineStep::Validate, e))?;
        Ok(Self {
            query: String::new(),
            context,
            meal,
            horizon,
            past_horizon,
            controller,
            iob_override: None,
            doses: Vec::new(),
            calibration: None,
            criterion: SafetyCriterion::default(),
            sim: SimConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(format!("future horizon must be > 0 (got {})", self.horizon));
        }
        if !(self.past_horizon.is_finite() && self.past_horizon >= 0.0) {
            return Err(format!(
                "past horizon must be >= 0 (got {})",
                self.past_horizon
            ));
        }
        if self.context.span() + 1e-9 < self.past_horizon {
            return Err(format!(
                "context trace spans {} min, shorter than the past horizon {}",
                self.context.span(),
                self.past_horizon
            ));
        }
        if let Some(m) = &self.meal {
            m.validate().map_err(|e| e.to_string())?;
            if m.time < 0.0 || m.time > self.horizon {
                return Err(format!(
                    "meal time {} outside [0, {}]",
                    m.time, self.horizon
                ));
            }
        }
        if let Some(v) = self.iob_override {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("IOB must be >= 0 (got {v})"));
            }
        }
        self.controller.validate().map_err(|e| e.to_string())?;
        self.sim.validate().map_err(|e| e.to_string())?;
        if !self.context.last().state.is_finite() {
            return Err("context trace ends in a non-finite state".into());
        }
        Ok(())
    }
}

/// Step 1: where ω^P comes from.
#[derive(Debug, Clone, Copy)]
pub enum CoefficientSource<'a> {
    Network(&'a EstimatorNetwork),
    /// Known coefficients (e.g. the virtual patient's own).
    Fixed,
}

/// Step 2: who predicts the no-action trajectory.
#[derive(Clone, Copy)]
pub enum TracePredictor<'a> {
    /// Local simulation of the estimated model.
    Local,
    /// Forward prompt to a language model; the answer is the IOB decay as a
    /// fraction of the current IOB.
    Llm {
        responder: &'a dyn Responder,
        spec: SeriesSpec,
    },
}

/// Step 3: who turns the request into a usage plan.
#[derive(Clone, Copy)]
pub enum PlanMapper<'a> {
    RuleBased(PlanMode),
    /// Bolus from a chat answer to the contextualized bolus question; set
    /// points as in the rule-based plan.
    Llm(&'a dyn Responder),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStep {
    Validate,
    Estimate,
    Predict,
    Map,
    Simulate,
    Gate,
}

impl PipelineStep {
    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            PipelineStep::Validate => "validate",
            PipelineStep::Estimate => "estimate",
            PipelineStep::Predict => "predict",
            PipelineStep::Map => "map",
            PipelineStep::Simulate => "simulate",
            PipelineStep::Gate => "gate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("step {} ({}) failed: {message}", step.index(), step.name())]
pub struct PipelineError {
    pub step: PipelineStep,
    pub message: String,
}

impl PipelineError {
    fn at(step: PipelineStep, e: impl std::fmt::Display) -> Self {
        Self {
            step,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineProvenance {
    /// ω^P used for prediction and gating.
    pub coefficients: Coefficients,
    pub coefficient_source: String,
    pub predictor: String,
    /// Step-2 output.
    pub prediction: Trace,
    pub mapper: String,
    /// IOB fed to the mapper (U).
    pub iob_units: f64,
    pub initial_state: PlantState,
    pub request_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDecision {
    pub plan: UsagePlan,
    pub verdict: Verdict,
    pub robustness: Robustness,
    pub first_violation: Option<f64>,
    /// Forward simulation the verdict was computed on.
    pub predicted: Trace,
    /// Present iff the verdict is Unsafe.
    pub feedback: Option<String>,
    pub provenance: PipelineProvenance,
}

impl PlanDecision {
    pub fn dose(&self) -> f64 {
        self.plan.total_units()
    }
}

/// Shift the insulin compartments so that the remaining insulin equals
/// `units`: extra insulin enters the depot, a lower value scales the excess down.
pub fn with_insulin_on_board(
    state: &PlantState,
    coeffs: &Coefficients,
    basal_rate: f64,
    units: f64,
) -> PlantState {
    let remaining = insulin_remaining(state, coeffs, basal_rate);
    if units >= remaining || remaining <= 0.0 {
        return with_fresh_insulin(state, coeffs, units - remaining.max(0.0));
    }
    let rest = PlantState::insulin_steady_state(coeffs, basal_rate, state.glucose);
    let f = units / remaining;
    PlantState {
        y: rest.y + f * (state.y - rest.y),
        z: rest.z + f * (state.z - rest.z),
        iob: rest.iob + f * (state.iob - rest.iob),
        glucose: state.glucose,
    }
}

/// Steps 1-5: estimate ω^P, predict, map to a plan, re-simulate the plan
/// locally under ω^P and gate it.
pub fn run_pipeline(
    req: &PlanRequest,
    patient: &VirtualPatient,
    source: CoefficientSource<'_>,
    predictor: TracePredictor<'_>,
    mapper: PlanMapper<'_>,
) -> Result<PlanDecision, PipelineError> {
    use PipelineStep::*;
    req.validate().map_err(|e| PipelineError::at(Validate, e))?;
    let ctrl = &req.controller;

    // 1
    let (coeffs, coefficient_source) = match source {
        CoefficientSource::Fixed => (patient.coeffs, "fixed".to_string()),
        CoefficientSource::Network(net) => {
            let trace = req.calibration.as_ref().unwrap_or(&req.context);
            let c = net
                .estimate_coefficients(trace, true)
                .map_err(|e| PipelineError::at(Estimate, e))?;
            let c = Coefficients {
                i_b: patient.coeffs.i_b,
                ..c
            };
            (c, "network".to_string())
        }
    };
    let plant = patient
        .with_coeffs(coeffs)
        .plant(ctrl.cr, ctrl.basal_rate)
        .map_err(|e| PipelineError::at(Estimate, e))?;
    let mut initial = req.context.last().state;
    if let Some(units) = req.iob_override {
        initial = with_insulin_on_board(&initial, &coeffs, ctrl.basal_rate, units);
    }
    let meals: Vec<Meal> = req
        .meal
        .iter()
        .map(|m| Meal {
            time: m.time,
            carbs: m.carbs,
        })
        .collect();

    // 2
    let (prediction, predictor_name) = match predictor {
        TracePredictor::Local => {
            let tr = forward_simulate(
                &UsagePlan::empty(),
                &plant,
                &initial,
                ctrl,
                &meals,
                req.horizon,
                &req.sim,
            )
            .map_err(|e| PipelineError::at(Predict, e))?;
            (tr, "local".to_string())
        }
        TracePredictor::Llm { responder, spec } => {
            let iob_now = insulin_remaining(&initial, &coeffs, ctrl.basal_rate).max(0.0);
            // the prompt regime counts time in seconds
            let prompt = format_forward_prompt(coeffs.k1 / 60.0, &spec);
            let answer = responder
                .respond(&prompt)
                .map_err(|e| PipelineError::at(Predict, e))?;
            let series =
                parse_series_response(&answer).map_err(|e| PipelineError::at(Predict, e))?;
            let scaled: Vec<f64> = series.iter().map(|v| v * iob_now).collect();
            let tr = Trace::from_iob(0.0, spec.sample_period / 60.0, &scaled)
                .map_err(|e| PipelineError::at(Predict, e))?;
            (tr, format!("llm:{}", responder.name()))
        }
    };

    // 3
    let exact = IobEstimator::Exact { coeffs };
    let iob_estimator = match (req.iob_override, mapper) {
        (Some(units), _) => IobEstimator::Given { units },
        (None, PlanMapper::RuleBased(PlanMode::Linear | PlanMode::Faulty)) => {
            IobEstimator::Linear {
                doses: req.doses.clone(),
            }
        }
        (None, _) => exact,
    };
    let iob_units = iob_estimator
        .estimate(ctrl, &req.context)
        .map_err(|e| PipelineError::at(Map, e))?;
    let (plan, mapper_name) = match (&req.meal, mapper) {
        (None, PlanMapper::RuleBased(mode)) => {
            (UsagePlan::empty(), format!("rule:{}", mode.as_str()))
        }
        (None, PlanMapper::Llm(r)) => (UsagePlan::empty(), format!("llm:{}", r.name())),
        (Some(meal), PlanMapper::RuleBased(mode)) => {
            let plan = build_meal_plan_with(
                meal,
                ctrl,
                &iob_estimator,
                &req.context,
                req.horizon,
                mode.formula(),
            )
            .map_err(|e| PipelineError::at(Map, e))?;
            (plan, format!("rule:{}", mode.as_str()))
        }
        (Some(meal), PlanMapper::Llm(r)) => {
            let prompt = format_bolus_prompt(meal.carbs, ctrl.cr, iob_units);
            let answer = r.respond(&prompt).map_err(|e| PipelineError::at(Map, e))?;
            let dose = parse_dose_response(&answer).map_err(|e| PipelineError::at(Map, e))?;
            let mut plan = build_meal_plan_with(
                meal,
                ctrl,
                &IobEstimator::Given { units: iob_units },
                &req.context,
                req.horizon,
                BolusFormula::Standard,
            )
            .map_err(|e| PipelineError::at(Map, e))?;
            plan.boluses[0].units = dose;
            plan.provenance = Some(PlanProvenance {
                estimator: iob_estimator.name().into(),
                formula: "llm".into(),
                iob_units,
                config_hash: config_hash(ctrl),
            });
            (plan, format!("llm:{}", r.name()))
        }
    };

    // 4
    let predicted = forward_simulate(&plan, &plant, &initial, ctrl, &meals, req.horizon, &req.sim)
        .map_err(|e| PipelineError::at(Simulate, e))?;

    // 5
    let outcome = gate(&predicted, &req.criterion).map_err(|e| PipelineError::at(Gate, e))?;
    Ok(PlanDecision {
        plan,
        verdict: outcome.verdict,
        robustness: outcome.robustness,
        first_violation: outcome.first_violation,
        predicted,
        feedback: outcome.feedback,
        provenance: PipelineProvenance {
            coefficients: coeffs,
            coefficient_source,
            predictor: predictor_name,
            prediction,
            mapper: mapper_name,
            iob_units,
            initial_state: initial,
            request_hash: config_hash(req),
        },
    })
}
