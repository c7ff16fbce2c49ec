use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::formula::{Signal, StlFormula};
use super::{StlError, HYPO_THRESHOLD};
use crate::dynamics::{Sample, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Robustness {
    pub rho: f64,
    /// min
    pub evaluated_at: f64,
}

impl Robustness {
    /// Non-strict acceptance: zero margin counts as satisfied.
    pub fn is_satisfied(&self) -> bool {
        self.rho >= 0.0
    }
}

const GRID_EPS: f64 = 1e-9;

/// Sample offsets covered by `[a, b]` minutes.
pub(crate) fn offsets(a: f64, b: f64, dt: f64) -> Result<(usize, usize), StlError> {
    let lo = (a / dt - GRID_EPS).ceil().max(0.0) as usize;
    let hi = (b / dt + GRID_EPS).floor().max(0.0) as usize;
    if lo > hi {
        return Err(StlError::EmptyWindow { a, b, dt });
    }
    Ok((lo, hi))
}

pub(crate) fn index_of(trace: &Trace, t: f64) -> Result<usize, StlError> {
    let x = (t - trace.t0()) / trace.dt();
    let i = x.round();
    if (x - i).abs() > 1e-6 || i < 0.0 || i as usize >= trace.len() {
        return Err(StlError::NotOnGrid {
            t,
            t0: trace.t0(),
            t_end: trace.t_end(),
        });
    }
    Ok(i as usize)
}

pub(crate) fn channel(sample: &Sample, signal: Signal) -> f64 {
    let s = &sample.state;
    match signal {
        Signal::Cgm => s.glucose,
        Signal::Iob => s.iob,
        Signal::Y => s.y,
        Signal::Z => s.z,
        Signal::U => sample.u,
        Signal::S => sample.s,
        Signal::Tbr { .. } => unreachable!("derived signal"),
    }
}

/// Fraction of samples in `[i, i + m]` below the hypoglycemia threshold.
pub(crate) fn tbr_fraction(samples: &[Sample], i: usize, m: usize) -> f64 {
    let below = samples[i..=i + m]
        .iter()
        .filter(|s| s.state.glucose < HYPO_THRESHOLD)
        .count();
    below as f64 / (m + 1) as f64
}

fn out_of_range(trace: &Trace, at: usize, a: f64, b: f64) -> StlError {
    let t = trace.time_at(at);
    StlError::Window {
        from: t + a,
        to: t + b,
        t0: trace.t0(),
        t_end: trace.t_end(),
    }
}

/// Sliding minimum (or maximum) over windows of `w` consecutive values.
fn sliding(values: &[f64], w: usize, count: usize, take_min: bool) -> Vec<f64> {
    let better = |x: f64, y: f64| if take_min { x <= y } else { x >= y };
    let mut out = Vec::with_capacity(count);
    let mut dq: VecDeque<usize> = VecDeque::new();
    for j in 0..count + w - 1 {
        while let Some(&back) = dq.back() {
            if better(values[j], values[back]) {
                dq.pop_back();
            } else {
                break;
            }
        }
        dq.push_back(j);
        if j + 1 >= w {
            let start = j + 1 - w;
            while dq.front().is_some_and(|&f| f < start) {
                dq.pop_front();
            }
            out.push(values[*dq.front().expect("window nonempty")]);
        }
    }
    out
}

/// Robustness values at sample indices `start .. start + count`.
fn eval(f: &StlFormula, trace: &Trace, start: usize, count: usize) -> Result<Vec<f64>, StlError> {
    let n = trace.len();
    let samples = trace.samples();
    let last = start + count - 1;
    match f {
        StlFormula::Atom {
            signal,
            cmp,
            threshold,
        } => match *signal {
            Signal::Tbr { window } => {
                let (_, m) = offsets(0.0, window, trace.dt())?;
                if last + m >= n {
                    return Err(out_of_range(trace, last, 0.0, window));
                }
                Ok((start..=last)
                    .map(|i| cmp.margin(tbr_fraction(samples, i, m), *threshold))
                    .collect())
            }
            sig => {
                if last >= n {
                    return Err(out_of_range(trace, last, 0.0, 0.0));
                }
                Ok(samples[start..=last]
                    .iter()
                    .map(|s| cmp.margin(channel(s, sig), *threshold))
                    .collect())
            }
        },
        StlFormula::Not(g) => Ok(eval(g, trace, start, count)?
            .into_iter()
            .map(|r| -r)
            .collect()),
        StlFormula::And(g, h) | StlFormula::Or(g, h) => {
            let left = eval(g, trace, start, count)?;
            let right = eval(h, trace, start, count)?;
            let is_and = matches!(f, StlFormula::And(..));
            Ok(left
                .into_iter()
                .zip(right)
                .map(|(x, y)| if is_and { x.min(y) } else { x.max(y) })
                .collect())
        }
        StlFormula::Globally { a, b, body } | StlFormula::Eventually { a, b, body } => {
            let (lo, hi) = offsets(*a, *b, trace.dt())?;
            if last + hi >= n {
                return Err(out_of_range(trace, last, *a, *b));
            }
            let w = hi - lo + 1;
            let inner = eval(body, trace, start + lo, count + w - 1)?;
            Ok(sliding(
                &inner,
                w,
                count,
                matches!(f, StlFormula::Globally { .. }),
            ))
        }
    }
}

/// Quantitative robustness of `formula` on `trace` at time `t`.
pub fn robustness(formula: &StlFormula, trace: &Trace, t: f64) -> Result<Robustness, StlError> {
    formula.validate()?;
    let i = index_of(trace, t)?;
    let rho = eval(formula, trace, i, 1)?[0];
    Ok(Robustness {
        rho,
        evaluated_at: trace.time_at(i),
    })
}

/// Robustness at every sample index where the formula is evaluable.
pub fn robustness_signal(formula: &StlFormula, trace: &Trace) -> Result<Vec<f64>, StlError> {
    formula.validate()?;
    let reach = offsets(0.0, formula.horizon(), trace.dt())?.1;
    if reach >= trace.len() {
        return Err(out_of_range(trace, 0, 0.0, formula.horizon()));
    }
    eval(formula, trace, 0, trace.len() - reach)
}

/// Boolean satisfaction, evaluated directly from the definitions.
pub fn satisfies(formula: &StlFormula, trace: &Trace, t: f64) -> Result<bool, StlError> {
    formula.validate()?;
    let i = index_of(trace, t)?;
    sat_at(formula, trace, i)
}

fn sat_at(f: &StlFormula, trace: &Trace, i: usize) -> Result<bool, StlError> {
    let samples = trace.samples();
    match f {
        StlFormula::Atom {
            signal,
            cmp,
            threshold,
        } => {
            let x = match *signal {
                Signal::Tbr { window } => {
                    let (_, m) = offsets(0.0, window, trace.dt())?;
                    if i + m >= samples.len() {
                        return Err(out_of_range(trace, i, 0.0, window));
                    }
                    tbr_fraction(samples, i, m)
                }
                sig => channel(&samples[i], sig),
            };
            Ok(cmp.holds(x, *threshold))
        }
        StlFormula::Not(g) => Ok(!sat_at(g, trace, i)?),
        StlFormula::And(g, h) => Ok(sat_at(g, trace, i)? & sat_at(h, trace, i)?),
        StlFormula::Or(g, h) => Ok(sat_at(g, trace, i)? | sat_at(h, trace, i)?),
        StlFormula::Globally { a, b, body } | StlFormula::Eventually { a, b, body } => {
            let (lo, hi) = offsets(*a, *b, trace.dt())?;
            if i + hi >= samples.len() {
                return Err(out_of_range(trace, i, *a, *b));
            }
            let mut all = true;
            let mut any = false;
            for j in i + lo..=i + hi {
                let s = sat_at(body, trace, j)?;
                all &= s;
                any |= s;
            }
            Ok(if matches!(f, StlFormula::Globally { .. }) {
                all
            } else {
                any
            })
        }
    }
}
