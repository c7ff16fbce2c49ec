use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EstimatorError;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Liquid time-constant cell: `H` neurons driven by a scalar input.
///
/// The time constants are stored as `log_tau` so that `tau > 0` holds for
/// any parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtcCellParams {
    pub hidden: usize,
    /// ln(tau / min)
    pub log_tau: Vec<f64>,
    pub a: Vec<f64>,
    pub w_in: Vec<f64>,
    /// Row-major `H x H`; row `i` feeds neuron `i`.
    pub w_rec: Vec<f64>,
    pub b: Vec<f64>,
}

impl LtcCellParams {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            hidden,
            log_tau: vec![0.0; hidden],
            a: vec![0.0; hidden],
            w_in: vec![0.0; hidden],
            w_rec: vec![0.0; hidden * hidden],
            b: vec![0.0; hidden],
        }
    }

    /// Time constants log-spaced over `[tau_min, tau_max]`, small random weights.
    /// Gates start mostly closed (`b` near -5) so the state integrates over
    /// the whole trace instead of tracking the last few samples.
    pub fn init(hidden: usize, tau_min: f64, tau_max: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(hidden);
        let rec = Normal::new(0.0, 0.5 / (hidden as f64).sqrt()).expect("valid std");
        let inp = Normal::new(0.0, 1.0).expect("valid std");
        for i in 0..hidden {
            let s = if hidden > 1 {
                i as f64 / (hidden - 1) as f64
            } else {
                0.5
            };
            p.log_tau[i] = tau_min.ln() + s * (tau_max.ln() - tau_min.ln());
            p.a[i] = 1.0 + 0.1 * inp.sample(rng);
            p.w_in[i] = 3.0 * inp.sample(rng);
            p.b[i] = -5.0 + 0.5 * inp.sample(rng);
        }
        for w in &mut p.w_rec {
            *w = rec.sample(rng);
        }
        p
    }

    pub fn tau(&self, i: usize) -> f64 {
        self.log_tau[i].exp()
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        let h = self.hidden;
        if h == 0 {
            return Err(EstimatorError::InvalidParams(
                "hidden width must be >= 1".into(),
            ));
        }
        let shapes = [
            ("log_tau", self.log_tau.len(), h),
            ("a", self.a.len(), h),
            ("w_in", self.w_in.len(), h),
            ("w_rec", self.w_rec.len(), h * h),
            ("b", self.b.len(), h),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(EstimatorError::InvalidParams(format!(
                    "{name} has {got} entries, expected {want}"
                )));
            }
        }
        for (name, v) in [
            ("log_tau", &self.log_tau),
            ("a", &self.a),
            ("w_in", &self.w_in),
            ("w_rec", &self.w_rec),
            ("b", &self.b),
        ] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(EstimatorError::InvalidParams(format!(
                    "non-finite entry in {name}"
                )));
            }
        }
        Ok(())
    }
}

/// Values kept from one forward step for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    pub h_prev: Vec<f64>,
    pub f: Vec<f64>,
    pub den: Vec<f64>,
    pub h_next: Vec<f64>,
    pub x: f64,
    pub dt: f64,
}

fn gate_values(p: &LtcCellParams, h: &[f64], x: f64) -> Vec<f64> {
    let n = p.hidden;
    (0..n)
        .map(|i| {
            let row = &p.w_rec[i * n..(i + 1) * n];
            let pre = p.w_in[i] * x + row.iter().zip(h).map(|(w, hj)| w * hj).sum::<f64>() + p.b[i];
            sigmoid(pre)
        })
        .collect()
}

/// One fused semi-implicit step:
/// `h <- (h + dt f a) / (1 + dt (1/tau + f))`, `f = sigmoid(w_in x + W h + b)`.
pub fn ltc_cell_step(
    hidden: &[f64],
    input: f64,
    dt: f64,
    params: &LtcCellParams,
) -> Result<Vec<f64>, EstimatorError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(EstimatorError::InvalidInput(format!(
            "step must be positive (got {dt})"
        )));
    }
    if hidden.len() != params.hidden || hidden.iter().any(|v| !v.is_finite()) || !input.is_finite()
    {
        return Err(EstimatorError::InvalidInput(
            "hidden state or input is not finite / wrong size".into(),
        ));
    }
    params.validate()?;
    Ok(step_cached(hidden, input, dt, params).h_next)
}

pub(crate) fn step_cached(h: &[f64], x: f64, dt: f64, p: &LtcCellParams) -> StepCache {
    let f = gate_values(p, h, x);
    let mut den = Vec::with_capacity(p.hidden);
    let mut h_next = Vec::with_capacity(p.hidden);
    for i in 0..p.hidden {
        let d = 1.0 + dt * ((-p.log_tau[i]).exp() + f[i]);
        den.push(d);
        h_next.push((h[i] + dt * f[i] * p.a[i]) / d);
    }
    StepCache {
        h_prev: h.to_vec(),
        f,
        den,
        h_next,
        x,
        dt,
    }
}

/// Run the cell over `inputs` from a zero state, `unfolds` sub-steps per sample.
pub(crate) fn run_cached(
    p: &LtcCellParams,
    inputs: &[f64],
    dt: f64,
    unfolds: usize,
) -> Vec<StepCache> {
    let sub = dt / unfolds as f64;
    let mut h = vec![0.0; p.hidden];
    let mut caches = Vec::with_capacity(inputs.len() * unfolds);
    for &x in inputs {
        for _ in 0..unfolds {
            let c = step_cached(&h, x, sub, p);
            h.clone_from(&c.h_next);
            caches.push(c);
        }
    }
    caches
}

pub(crate) fn run_final(p: &LtcCellParams, inputs: &[f64], dt: f64, unfolds: usize) -> Vec<f64> {
    let sub = dt / unfolds as f64;
    let mut h = vec![0.0; p.hidden];
    for &x in inputs {
        for _ in 0..unfolds {
            h = step_cached(&h, x, sub, p).h_next;
        }
    }
    h
}

/// Backpropagate `dh_final` through the cached steps, accumulating into `grad`.
pub(crate) fn backward(
    p: &LtcCellParams,
    caches: &[StepCache],
    dh_final: &[f64],
    grad: &mut LtcCellParams,
) {
    let n = p.hidden;
    let mut g = dh_final.to_vec();
    let mut dpre = vec![0.0; n];
    for c in caches.iter().rev() {
        let mut dh_prev = vec![0.0; n];
        for i in 0..n {
            let dnum = g[i] / c.den[i];
            let dden = -g[i] * c.h_next[i] / c.den[i];
            let inv_tau = (-p.log_tau[i]).exp();
            let df = dnum * c.dt * p.a[i] + dden * c.dt;
            grad.a[i] += dnum * c.dt * c.f[i];
            grad.log_tau[i] += -dden * c.dt * inv_tau;
            dpre[i] = df * c.f[i] * (1.0 - c.f[i]);
            grad.w_in[i] += dpre[i] * c.x;
            grad.b[i] += dpre[i];
            dh_prev[i] += dnum;
        }
        for i in 0..n {
            let row = i * n;
            for j in 0..n {
                grad.w_rec[row + j] += dpre[i] * c.h_prev[j];
                dh_prev[j] += p.w_rec[row + j] * dpre[i];
            }
        }
        g = dh_prev;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_neuron_by_hand() {
        let mut p = LtcCellParams::zeros(1);
        p.a[0] = 2.0;
        p.log_tau[0] = 10f64.ln();
        // f = 0.5; h = (0.3 + 0.5*0.5*2) / (1 + 0.5*(0.1 + 0.5))
        let h = ltc_cell_step(&[0.3], 0.7, 0.5, &p).unwrap();
        assert!((h[0] - 0.8 / 1.3).abs() < 1e-15);
    }

    #[test]
    fn tiny_step_leaves_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LtcCellParams::init(6, 2.0, 50.0, &mut rng);
        let h0 = vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.4];
        let h = ltc_cell_step(&h0, 0.9, 1e-12, &p).unwrap();
        for (a, b) in h.iter().zip(&h0) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_input_reaches_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = LtcCellParams::init(8, 2.0, 20.0, &mut rng);
        let mut h = vec![0.0; 8];
        let mut delta = f64::INFINITY;
        for _ in 0..5000 {
            let next = ltc_cell_step(&h, 0.5, 1.0, &p).unwrap();
            delta = next
                .iter()
                .zip(&h)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            h = next;
        }
        assert!(delta < 1e-8, "delta {delta}");
        // zero weights: fixed point is 0.5 a / (1/tau + 0.5)
        let mut z = LtcCellParams::zeros(1);
        z.a[0] = 1.0;
        z.log_tau[0] = 4f64.ln();
        let mut h = vec![0.0];
        for _ in 0..2000 {
            h = ltc_cell_step(&h, 3.0, 1.0, &z).unwrap();
        }
        assert!((h[0] - 0.5 / (0.25 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let p = LtcCellParams::zeros(2);
        assert!(ltc_cell_step(&[0.0, 0.0], 1.0, 0.0, &p).is_err());
        assert!(ltc_cell_step(&[0.0, f64::NAN], 1.0, 1.0, &p).is_err());
        let mut q = p.clone();
        q.w_in[0] = f64::INFINITY;
        assert!(ltc_cell_step(&[0.0, 0.0], 1.0, 1.0, &q).is_err());
    }
}
