use serde::{Deserialize, Serialize};

use super::formula::StlFormula;
use super::robustness::{offsets, robustness, tbr_fraction, Robustness};
use super::{StlError, HYPO_THRESHOLD};
use crate::dynamics::Trace;

pub const HYPER_THRESHOLD: f64 = 180.0;

/// Glycemic outcome percentages over the CGM channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMetrics {
    pub tir: f64,
    pub tar: f64,
    pub tbr: f64,
    pub mean_cgm: f64,
}

pub fn outcome_metrics(trace: &Trace) -> Result<OutcomeMetrics, StlError> {
    outcome_metrics_of(&trace.glucose())
}

pub fn outcome_metrics_of(cgm: &[f64]) -> Result<OutcomeMetrics, StlError> {
    if cgm.is_empty() {
        return Err(StlError::EmptyTrace);
    }
    let n = cgm.len() as f64;
    let below = cgm.iter().filter(|&&g| g < HYPO_THRESHOLD).count() as f64;
    let high = cgm.iter().filter(|&&g| g > HYPER_THRESHOLD).count() as f64;
    let tbr = 100.0 * below / n;
    let tar = 100.0 * high / n;
    Ok(OutcomeMetrics {
        tir: 100.0 * (n - below - high) / n,
        tar,
        tbr,
        mean_cgm: cgm.iter().sum::<f64>() / n,
    })
}

/// Number of runs below 70 mg/dl lasting at least `min_duration` minutes.
pub fn hypo_events(cgm: &[f64], dt: f64, min_duration: f64) -> usize {
    let mut events = 0;
    let mut run = 0usize;
    let mut flush = |run: &mut usize| {
        if *run > 0 && *run as f64 * dt >= min_duration - 1e-9 {
            events += 1;
        }
        *run = 0;
    };
    for &g in cgm {
        if g < HYPO_THRESHOLD {
            run += 1;
        } else {
            flush(&mut run);
        }
    }
    flush(&mut run);
    events
}

/// Detail of an ADA criterion evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaReport {
    pub robustness: Robustness,
    /// Window length used (min).
    pub window: f64,
    /// Largest windowed TBR fraction.
    pub worst_tbr: f64,
    /// Start of the first window whose TBR reaches the limit.
    pub first_violation: Option<f64>,
}

/// `G (tbr_window < 4%)` over the whole trace. `window = None` uses the full
/// trace as a single window.
pub fn ada_safety(trace: &Trace, window: Option<f64>) -> Result<Robustness, StlError> {
    Ok(ada_report(trace, window)?.robustness)
}

pub fn ada_report(trace: &Trace, window: Option<f64>) -> Result<AdaReport, StlError> {
    let span = trace.span();
    let window = window.unwrap_or(span);
    if !(window.is_finite() && window >= 0.0) || window > span + 1e-9 {
        return Err(StlError::Window {
            from: trace.t0(),
            to: trace.t0() + window,
            t0: trace.t0(),
            t_end: trace.t_end(),
        });
    }
    let formula = StlFormula::ada(span, window);
    let robustness = robustness(&formula, trace, trace.t0())?;
    let (_, m) = offsets(0.0, window, trace.dt())?;
    let samples = trace.samples();
    let tbr: Vec<f64> = (0..trace.len() - m)
        .map(|i| tbr_fraction(samples, i, m))
        .collect();
    let worst_tbr = tbr.iter().copied().fold(0.0, f64::max);
    let first_violation = tbr
        .iter()
        .position(|&f| f > super::ADA_TBR_LIMIT)
        .map(|i| trace.time_at(i));
    Ok(AdaReport {
        robustness,
        window,
        worst_tbr,
        first_violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cgm(values: &[f64]) -> Trace {
        Trace::from_glucose(0.0, 5.0, values).unwrap()
    }

    #[test]
    fn counting_examples() {
        let m = outcome_metrics(&cgm(&[100.0; 12])).unwrap();
        assert_eq!((m.tir, m.tar, m.tbr, m.mean_cgm), (100.0, 0.0, 0.0, 100.0));
        let mut v = vec![100.0; 100];
        v[..10].fill(65.0);
        let m = outcome_metrics(&cgm(&v)).unwrap();
        assert_eq!((m.tir, m.tbr), (90.0, 10.0));
        assert!((m.mean_cgm - 96.5).abs() < 1e-12);
        let m = outcome_metrics(&cgm(&[200.0; 3])).unwrap();
        assert_eq!((m.tar, m.mean_cgm), (100.0, 200.0));
        assert!(outcome_metrics_of(&[]).is_err());
    }

    #[test]
    fn ada_values() {
        assert_eq!(ada_safety(&cgm(&[100.0; 50]), None).unwrap().rho, 0.04);
        let mut v = vec![100.0; 100];
        v[40..50].fill(60.0);
        let r = ada_report(&cgm(&v), None).unwrap();
        assert!((r.robustness.rho + 0.06).abs() < 1e-15);
        assert_eq!(r.first_violation, Some(0.0));
        v[44..50].fill(100.0);
        let r = ada_safety(&cgm(&v), None).unwrap();
        assert_eq!(r.rho, 0.0);
        assert!(r.is_satisfied());
        assert!(ada_safety(&cgm(&v), Some(1000.0)).is_err());
    }

    #[test]
    fn sliding_windows_localize_violations() {
        let mut v = vec![100.0; 100];
        v[80..84].fill(60.0);
        let r = ada_report(&cgm(&v), Some(45.0)).unwrap();
        assert!((r.worst_tbr - 0.4).abs() < 1e-12);
        assert_eq!(r.first_violation, Some(5.0 * 71.0));
    }

    #[test]
    fn events_need_duration() {
        let v = [
            100.0, 60.0, 60.0, 100.0, 60.0, 60.0, 60.0, 100.0, 60.0, 60.0, 60.0,
        ];
        assert_eq!(hypo_events(&v, 5.0, 15.0), 2);
        assert_eq!(hypo_events(&v, 5.0, 10.0), 3);
    }

    proptest! {
        #[test]
        fn metrics_partition(values in prop::collection::vec(20.0..400.0f64, 1..300)) {
            let m = outcome_metrics_of(&values).unwrap();
            prop_assert!((m.tir + m.tar + m.tbr - 100.0).abs() < 1e-9);
            for p in [m.tir, m.tar, m.tbr] {
                prop_assert!((0.0..=100.0).contains(&p));
            }
        }
    }
}
