use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gate::{
    forward_simulate, gate, with_fresh_insulin, SafetyCriterion, Verdict, VirtualPatient,
};
use super::SafetyError;
use crate::dynamics::{
    simulate, Bolus, ControlLoop, InputSchedule, Interval, Meal, SetPointSchedule, SimConfig,
};
use crate::planner::{build_meal_plan_with, ControllerConfig, IobEstimator, MealEvent, PlanMode};
use crate::provenance::config_hash;
use crate::stl::{hypo_events, outcome_metrics, OutcomeMetrics};

pub const SUITE_CSV_HEADER: &str = "mode,scenario_id,tir,tar,tbr,mean_cgm,verdict,rho";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub count: usize,
    pub seed: u64,
    /// g
    pub carbs: Interval,
    /// g/U
    pub cr: Interval,
    /// Minutes between the priming dose and the meal.
    pub prior_offset: Interval,
    /// Priming dose as a fraction of the meal's carbs / CR.
    pub priming_fraction: Interval,
    /// Post-meal horizon (min).
    pub horizon: f64,
    pub dt: f64,
    /// Minimum length of a counted hypoglycemia event (min).
    pub hypo_min_duration: f64,
    pub modes: Vec<PlanMode>,
    pub patient: VirtualPatient,
    /// CR is overwritten per scenario.
    pub controller: ControllerConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            count: 50,
            seed: 7,
            carbs: Interval::new(7.0, 50.0),
            cr: Interval::new(10.0, 25.0),
            prior_offset: Interval::new(30.0, 180.0),
            priming_fraction: Interval::new(0.5, 1.0),
            horizon: 360.0,
            dt: 1.0,
            hypo_min_duration: 15.0,
            modes: PlanMode::ALL.to_vec(),
            patient: VirtualPatient::default(),
            controller: ControllerConfig::default(),
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<(), SafetyError> {
        if self.count == 0 {
            return Err(SafetyError::InvalidConfig(
                "scenario count must be >= 1".into(),
            ));
        }
        for (name, iv) in [
            ("carbs", self.carbs),
            ("cr", self.cr),
            ("prior_offset", self.prior_offset),
            ("priming_fraction", self.priming_fraction),
        ] {
            if !(iv.lo.is_finite() && iv.hi.is_finite() && iv.lo <= iv.hi && iv.lo >= 0.0) {
                return Err(SafetyError::InvalidConfig(format!(
                    "{name} range [{}, {}] is invalid",
                    iv.lo, iv.hi
                )));
            }
        }
        if self.carbs.lo <= 0.0 {
            return Err(SafetyError::InvalidConfig("carbs must be > 0".into()));
        }
        if !(self.horizon > 0.0 && self.dt > 0.0 && self.dt <= 1.0) {
            return Err(SafetyError::InvalidConfig(
                "horizon must be > 0 and dt in (0, 1]".into(),
            ));
        }
        if self.modes.is_empty() {
            return Err(SafetyError::InvalidConfig(
                "no planner modes selected".into(),
            ));
        }
        self.controller.with_cr(self.cr.lo.max(1.0)).validate()?;
        Ok(())
    }
}

/// One paired scenario draw shared by every planner mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: usize,
    pub carbs: f64,
    pub cr: f64,
    /// min before the meal
    pub prior_offset: f64,
    /// U
    pub priming_units: f64,
    /// mg/dl above target when the priming dose is taken
    pub initial_excess: f64,
}

pub fn draw_scenarios(config: &SuiteConfig) -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draw = |iv: Interval| iv.from_unit(rng.random::<f64>());
    (0..config.count)
        .map(|id| {
            let carbs = draw(config.carbs);
            let cr = draw(config.cr);
            let prior_offset = draw(config.prior_offset).round();
            let priming_units = draw(config.priming_fraction) * carbs / cr;
            Scenario {
                id,
                carbs,
                cr,
                prior_offset,
                priming_units,
                initial_excess: priming_units * config.patient.isf,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub mode: PlanMode,
    pub scenario_id: usize,
    pub dose: f64,
    pub iob_estimate: f64,
    pub metrics: OutcomeMetrics,
    pub min_glucose: f64,
    pub hypo_events: usize,
    pub verdict: Verdict,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFailure {
    pub mode: PlanMode,
    pub scenario_id: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: PlanMode,
    pub scenarios: usize,
    pub failures: usize,
    pub tir: f64,
    pub tar: f64,
    pub tbr: f64,
    pub mean_cgm: f64,
    pub hypo_events: usize,
    pub unsafe_plans: usize,
    pub mean_dose: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub config_hash: String,
    pub seed: u64,
    pub count: usize,
    pub scenarios: Vec<Scenario>,
    pub results: Vec<ScenarioResult>,
    pub failures: Vec<ScenarioFailure>,
    pub summary: Vec<ModeSummary>,
}

impl SuiteReport {
    pub fn mode(&self, mode: PlanMode) -> Option<&ModeSummary> {
        self.summary.iter().find(|s| s.mode == mode)
    }

    pub fn has_failures(&self) -> bool {
        !self.failures.is_empty()
    }

    /// Per-mode, per-scenario rows; failed runs carry empty metrics.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(SUITE_CSV_HEADER);
        out.push('\n');
        for s in &self.summary {
            for r in self.results.iter().filter(|r| r.mode == s.mode) {
                let m = &r.metrics;
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{:?},{}",
                    r.mode.as_str(),
                    r.scenario_id,
                    m.tir,
                    m.tar,
                    m.tbr,
                    m.mean_cgm,
                    r.verdict,
                    r.rho
                );
            }
            for f in self.failures.iter().filter(|f| f.mode == s.mode) {
                let _ = writeln!(out, "{},{},,,,,Failed,", f.mode.as_str(), f.scenario_id);
            }
        }
        out
    }

    /// JSON summary: aggregates, failures and the config hash.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "config_hash": self.config_hash,
            "seed": self.seed,
            "count": self.count,
            "modes": self.summary,
            "failures": self.failures,
        })
    }
}

/// Run one scenario under one planner mode.
pub fn run_scenario(
    config: &SuiteConfig,
    sc: &Scenario,
    mode: PlanMode,
) -> Result<ScenarioResult, SafetyError> {
    let ctrl = config.controller.with_cr(sc.cr);
    let plant = config.patient.plant(sc.cr, ctrl.basal_rate)?;
    let sim = SimConfig::with_dt(config.dt);

    // context: priming dose at -offset, controller running at the usual set point
    let mut start = config.patient.rest_state(ctrl.basal_rate);
    start.glucose += sc.initial_excess;
    let start = with_fresh_insulin(&start, &plant.coeffs, sc.priming_units);
    let pi = ctrl.controller();
    let control = ControlLoop::new(&pi, SetPointSchedule::constant(ctrl.set_point));
    let context = simulate(
        &start,
        &plant,
        &InputSchedule::default(),
        &control,
        -sc.prior_offset,
        sc.prior_offset,
        &sim,
    )?;

    let estimator = match mode {
        PlanMode::Exact => IobEstimator::Exact {
            coeffs: plant.coeffs,
        },
        PlanMode::Linear | PlanMode::Faulty => IobEstimator::Linear {
            doses: vec![Bolus {
                time: -sc.prior_offset,
                dose: sc.priming_units,
            }],
        },
    };
    let meal = MealEvent::new(0.0, sc.carbs)?;
    let plan = build_meal_plan_with(
        &meal,
        &ctrl,
        &estimator,
        &context,
        config.horizon,
        mode.formula(),
    )?;
    let iob_estimate = plan.provenance.as_ref().map_or(0.0, |p| p.iob_units);
    let meals = [Meal {
        time: 0.0,
        carbs: sc.carbs,
    }];
    let trace = forward_simulate(
        &plan,
        &plant,
        &context.last().state,
        &ctrl,
        &meals,
        config.horizon,
        &sim,
    )?;
    let metrics = outcome_metrics(&trace)?;
    let cgm = trace.glucose();
    let outcome = gate(&trace, &SafetyCriterion::default())?;
    Ok(ScenarioResult {
        mode,
        scenario_id: sc.id,
        dose: plan.total_units(),
        iob_estimate,
        metrics,
        min_glucose: cgm.iter().copied().fold(f64::INFINITY, f64::min),
        hypo_events: hypo_events(&cgm, trace.dt(), config.hypo_min_duration),
        verdict: outcome.verdict,
        rho: outcome.robustness.rho,
    })
}

/// Paired scenario suite. Scenarios run in parallel (on `workers` threads
/// when given); results are reduced in scenario order.
pub fn run_scenario_suite(
    config: &SuiteConfig,
    workers: Option<usize>,
) -> Result<SuiteReport, SafetyError> {
    config.validate()?;
    let scenarios = draw_scenarios(config);
    let run_all = || -> Vec<Vec<Result<ScenarioResult, SafetyError>>> {
        scenarios
            .par_iter()
            .map(|sc| {
                config
                    .modes
                    .iter()
                    .map(|&m| run_scenario(config, sc, m))
                    .collect()
            })
            .collect()
    };
    let per_scenario = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| SafetyError::InvalidConfig(format!("worker pool: {e}")))?
            .install(run_all),
        None => run_all(),
    };

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (sc, runs) in scenarios.iter().zip(per_scenario) {
        for (&mode, run) in config.modes.iter().zip(runs) {
            match run {
                Ok(r) => results.push(r),
                Err(e) => failures.push(ScenarioFailure {
                    mode,
                    scenario_id: sc.id,
                    error: e.to_string(),
                }),
            }
        }
    }
    let summary = config
        .modes
        .iter()
        .map(|&mode| {
            let rs: Vec<&ScenarioResult> = results.iter().filter(|r| r.mode == mode).collect();
            let n = rs.len().max(1) as f64;
            let mean =
                |f: &dyn Fn(&ScenarioResult) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            ModeSummary {
                mode,
                scenarios: rs.len(),
                failures: failures.iter().filter(|f| f.mode == mode).count(),
                tir: mean(&|r| r.metrics.tir),
                tar: mean(&|r| r.metrics.tar),
                tbr: mean(&|r| r.metrics.tbr),
                mean_cgm: mean(&|r| r.metrics.mean_cgm),
                hypo_events: rs.iter().map(|r| r.hypo_events).sum(),
                unsafe_plans: rs.iter().filter(|r| r.verdict == Verdict::Unsafe).count(),
                mean_dose: mean(&|r| r.dose),
            }
        })
        .collect();
    Ok(SuiteReport {
        config_hash: config_hash(config),
        seed: config.seed,
        count: config.count,
        scenarios,
        results,
        failures,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SuiteConfig {
        SuiteConfig {
            count: 4,
            ..SuiteConfig::default()
        }
    }

    #[test]
    fn draws_respect_ranges() {
        let cfg = SuiteConfig::default();
        for s in draw_scenarios(&cfg) {
            assert!(cfg.carbs.contains(s.carbs) && cfg.cr.contains(s.cr));
            assert!(cfg.prior_offset.contains(s.prior_offset));
            let frac = s.priming_units * s.cr / s.carbs;
            assert!(
                cfg.priming_fraction.contains(frac + 1e-12)
                    || cfg.priming_fraction.contains(frac - 1e-12)
            );
        }
    }

    #[test]
    fn modes_share_draws_and_runs_repeat() {
        let cfg = small();
        let a = run_scenario_suite(&cfg, Some(2)).unwrap();
        assert_eq!(a.results.len(), 12);
        for id in 0..4 {
            let doses: Vec<f64> = a
                .results
                .iter()
                .filter(|r| r.scenario_id == id)
                .map(|r| r.dose)
                .collect();
            assert_eq!(doses.len(), 3);
        }
        let b = run_scenario_suite(&cfg, Some(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.to_csv().starts_with(SUITE_CSV_HEADER));
    }

    #[test]
    fn faulty_never_doses_less() {
        let cfg = small();
        let report = run_scenario_suite(&cfg, None).unwrap();
        for id in 0..cfg.count {
            let dose = |m| {
                report
                    .results
                    .iter()
                    .find(|r| r.scenario_id == id && r.mode == m)
                    .unwrap()
                    .dose
            };
            assert!(dose(PlanMode::Faulty) >= dose(PlanMode::Linear));
        }
    }

    #[test]
    fn rejects_empty_suite() {
        assert!(run_scenario_suite(
            &SuiteConfig {
                count: 0,
                ..Default::default()
            },
            None
        )
        .is_err());
    }
}
