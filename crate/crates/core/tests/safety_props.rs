use aidplan::dynamics::{Meal, SimConfig};
use aidplan::planner::{ControllerConfig, UsagePlan};
use aidplan::safety::*;
use aidplan::stl::ada_safety;
use proptest::prelude::*;

fn min_glucose(carbs: f64, cr: f64, iob: f64, units: f64) -> f64 {
    let vp = VirtualPatient::default();
    let cfg = ControllerConfig::default().with_cr(cr);
    let plant = vp.plant(cr, cfg.basal_rate).unwrap();
    let start = with_fresh_insulin(&vp.rest_state(cfg.basal_rate), &plant.coeffs, iob);
    let meal = [Meal { time: 0.0, carbs }];
    let tr = forward_simulate(
        &UsagePlan::single_bolus(0.0, units),
        &plant,
        &start,
        &cfg,
        &meal,
        360.0,
        &SimConfig::default(),
    )
    .unwrap();
    tr.glucose().into_iter().fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn more_insulin_never_raises_the_minimum(carbs in 7.0f64..50.0, cr in 5.0f64..25.0, iob in 0.0f64..3.0) {
        let grid: Vec<f64> = (0..8).map(|i| i as f64 * 1.5).collect();
        let mins: Vec<f64> = grid.iter().map(|&u| min_glucose(carbs, cr, iob, u)).collect();
        for w in mins.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{mins:?}");
        }
    }

    #[test]
    fn pipeline_verdict_matches_ada_sign(carbs in 7.0f64..60.0, cr in 3.0f64..25.0, iob in 0.0f64..4.0) {
        let vp = VirtualPatient::default();
        let mut req = PlanRequest::at_rest(
            &vp,
            ControllerConfig::default().with_cr(cr),
            Some(aidplan::planner::MealEvent::new(0.0, carbs).unwrap()),
            360.0,
            60.0,
        )
        .unwrap();
        req.iob_override = Some(iob);
        for mode in aidplan::planner::PlanMode::ALL {
            let d = run_pipeline(&req, &vp, CoefficientSource::Fixed, TracePredictor::Local, PlanMapper::RuleBased(mode)).unwrap();
            let rho = ada_safety(&d.predicted, None).unwrap().rho;
            prop_assert_eq!(d.robustness.rho, rho);
            prop_assert_eq!(d.verdict == Verdict::Safe, rho >= 0.0);
            prop_assert_eq!(d.feedback.is_some(), d.verdict == Verdict::Unsafe);
        }
    }

    #[test]
    fn suite_modes_see_identical_draws(seed in 0u64..1000) {
        let cfg = SuiteConfig { count: 3, seed, horizon: 120.0, ..SuiteConfig::default() };
        let report = run_scenario_suite(&cfg, Some(1)).unwrap();
        prop_assert_eq!(&report.scenarios, &draw_scenarios(&cfg));
        for sc in &report.scenarios {
            let rows: Vec<_> = report.results.iter().filter(|r| r.scenario_id == sc.id).collect();
            prop_assert_eq!(rows.len(), cfg.modes.len());
        }
    }
}
