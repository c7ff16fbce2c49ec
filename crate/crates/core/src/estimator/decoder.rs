use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use super::EstimatorError;
use crate::dynamics::{simulate_insulin, Coefficients, PlantState};

/// Fixed initial condition and sampling of the IOB traces the estimator
/// reads and reconstructs. The default is the response to a bolus of `y0`
/// units into an empty compartment, scaled so the IOB peak is close to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceProtocol {
    /// min
    pub horizon: f64,
    /// Sampling period (min).
    pub dt: f64,
    /// RK4 steps per sample.
    pub substeps: usize,
    pub y0: f64,
    pub z0: f64,
    pub iob0: f64,
    pub i_b: f64,
}

impl Default for TraceProtocol {
    fn default() -> Self {
        Self {
            horizon: 120.0,
            dt: 1.0,
            substeps: 1,
            y0: 7.5,
            z0: 0.0,
            iob0: 0.0,
            i_b: 0.0,
        }
    }
}

impl TraceProtocol {
    pub fn samples(&self) -> usize {
        (self.horizon / self.dt - 1e-9).ceil() as usize + 1
    }

    pub fn initial_state(&self) -> PlantState {
        PlantState::new(self.y0, self.z0, self.iob0, 100.0)
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !(self.horizon > 0.0 && self.dt > 0.0 && self.substeps >= 1) {
            return Err(EstimatorError::InvalidConfig(
                "trace protocol needs horizon > 0, dt > 0 and substeps >= 1".into(),
            ));
        }
        if self.samples() < 2 {
            return Err(EstimatorError::InvalidConfig(
                "trace protocol yields fewer than 2 samples".into(),
            ));
        }
        Ok(())
    }
}

/// IOB channel of the unforced response, sampled every `dt`.
pub fn decode(
    coeffs: &Coefficients,
    initial: &PlantState,
    horizon: f64,
    dt: f64,
) -> Result<Vec<f64>, EstimatorError> {
    Ok(simulate_insulin(initial, coeffs, horizon, dt)?.iob())
}

/// Decode under a protocol, integrating with `substeps` RK4 steps per sample.
pub fn decode_protocol(
    coeffs: &Coefficients,
    protocol: &TraceProtocol,
) -> Result<Vec<f64>, EstimatorError> {
    let c = Coefficients {
        i_b: protocol.i_b,
        ..*coeffs
    };
    let h = protocol.dt / protocol.substeps as f64;
    let fine = decode(&c, &protocol.initial_state(), protocol.horizon, h)?;
    Ok(fine
        .into_iter()
        .step_by(protocol.substeps)
        .take(protocol.samples())
        .collect())
}

/// Value with derivatives along `(k1, n, p1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual3 {
    pub v: f64,
    pub d: [f64; 3],
}

impl Dual3 {
    pub const fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 3] }
    }

    pub fn variable(v: f64, slot: usize) -> Self {
        let mut d = [0.0; 3];
        d[slot] = 1.0;
        Self { v, d }
    }

    fn scale(self, s: f64) -> Self {
        Self {
            v: self.v * s,
            d: [self.d[0] * s, self.d[1] * s, self.d[2] * s],
        }
    }
}

impl Add for Dual3 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2]],
        }
    }
}

impl Sub for Dual3 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: [self.d[0] - o.d[0], self.d[1] - o.d[1], self.d[2] - o.d[2]],
        }
    }
}

impl Neg for Dual3 {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl Mul for Dual3 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: [
                self.d[0] * o.v + self.v * o.d[0],
                self.d[1] * o.v + self.v * o.d[1],
                self.d[2] * o.v + self.v * o.d[2],
            ],
        }
    }
}

impl Mul<f64> for Dual3 {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        self.scale(s)
    }
}

#[derive(Clone, Copy)]
struct DualState {
    y: Dual3,
    z: Dual3,
    iob: Dual3,
}

impl DualState {
    fn axpy(&self, h: f64, d: &DualState) -> DualState {
        DualState {
            y: self.y + d.y * h,
            z: self.z + d.z * h,
            iob: self.iob + d.iob * h,
        }
    }
}

/// Decoded IOB samples together with `d iob / d (k1, n, p1)` at each sample.
pub fn decode_with_tangents(
    coeffs: &Coefficients,
    protocol: &TraceProtocol,
) -> Result<(Vec<f64>, Vec<[f64; 3]>), EstimatorError> {
    protocol.validate()?;
    coeffs.validate()?;
    let k1 = Dual3::variable(coeffs.k1, 0);
    let n = Dual3::variable(coeffs.n, 1);
    let p1 = Dual3::variable(coeffs.p1, 2);
    let i_b = Dual3::constant(protocol.i_b);
    let two_k1 = k1 * 2.0;
    let k1_sq = k1 * k1;
    let rhs = |s: &DualState| DualState {
        y: s.z,
        z: -(two_k1 * s.z) - k1_sq * s.y,
        iob: -(n * s.iob) + p1 * (s.y + i_b),
    };
    let mut s = DualState {
        y: Dual3::constant(protocol.y0),
        z: Dual3::constant(protocol.z0),
        iob: Dual3::constant(protocol.iob0),
    };
    let h = protocol.dt / protocol.substeps as f64;
    let count = protocol.samples();
    let mut values = Vec::with_capacity(count);
    let mut tangents = Vec::with_capacity(count);
    for i in 0..count {
        if !s.iob.v.is_finite() {
            return Err(EstimatorError::NonFinite(format!(
                "decoder state at sample {i}"
            )));
        }
        values.push(s.iob.v);
        tangents.push(s.iob.d);
        if i + 1 == count {
            break;
        }
        for _ in 0..protocol.substeps {
            let a = rhs(&s);
            let b = rhs(&s.axpy(0.5 * h, &a));
            let c = rhs(&s.axpy(0.5 * h, &b));
            let d = rhs(&s.axpy(h, &c));
            let w = h / 6.0;
            s = DualState {
                y: s.y + (a.y + b.y * 2.0 + c.y * 2.0 + d.y) * w,
                z: s.z + (a.z + b.z * 2.0 + c.z * 2.0 + d.z) * w,
                iob: s.iob + (a.iob + b.iob * 2.0 + c.iob * 2.0 + d.iob) * w,
            };
        }
    }
    Ok((values, tangents))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vp() -> Coefficients {
        Coefficients::virtual_patient()
    }

    #[test]
    fn dual_values_match_simulator() {
        let proto = TraceProtocol::default();
        let (vals, _) = decode_with_tangents(&vp(), &proto).unwrap();
        let sim = decode_protocol(&vp(), &proto).unwrap();
        assert_eq!(vals.len(), sim.len());
        for (a, b) in vals.iter().zip(&sim) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tangents_match_finite_differences() {
        let proto = TraceProtocol {
            horizon: 60.0,
            substeps: 2,
            ..Default::default()
        };
        let c = vp();
        let (_, tan) = decode_with_tangents(&c, &proto).unwrap();
        let h = 1e-6;
        for slot in 0..3 {
            let bump = |s: f64| {
                let mut x = [c.k1, c.n, c.p1];
                x[slot] += s;
                Coefficients::new(x[0], x[1], x[2], 0.0).unwrap()
            };
            let up = decode_protocol(&bump(h), &proto).unwrap();
            let dn = decode_protocol(&bump(-h), &proto).unwrap();
            for i in 0..up.len() {
                let fd = (up[i] - dn[i]) / (2.0 * h);
                assert!(
                    (fd - tan[i][slot]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "slot {slot} i {i}"
                );
            }
        }
    }

    #[test]
    fn faster_clearance_decays_faster() {
        let proto = TraceProtocol::default();
        let base = decode_protocol(&vp(), &proto).unwrap();
        let fast = decode_protocol(
            &Coefficients {
                n: 2.0 * vp().n,
                ..vp()
            },
            &proto,
        )
        .unwrap();
        assert_eq!(base[0], fast[0]);
        for i in 1..base.len() {
            assert!(fast[i] < base[i], "sample {i}");
        }
    }

    #[test]
    fn halving_step_agrees() {
        let coarse = TraceProtocol::default();
        let fine = TraceProtocol {
            substeps: 2,
            ..coarse
        };
        let a = decode_protocol(&vp(), &coarse).unwrap();
        let b = decode_protocol(&vp(), &fine).unwrap();
        let err = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-5, "{err}");
    }
}
