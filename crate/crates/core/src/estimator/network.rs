use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::decoder::{decode_with_tangents, TraceProtocol};
use super::ltc::{backward, run_cached, run_final, sigmoid, LtcCellParams};
use super::EstimatorError;
use crate::dynamics::{CoefficientRanges, Coefficients, Trace};

/// Trainable parameters: LTC cell plus the sigmoid head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorParams {
    pub cell: LtcCellParams,
    /// Row-major `3 x H`.
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl EstimatorParams {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            cell: LtcCellParams::zeros(hidden),
            head_w: vec![0.0; 3 * hidden],
            head_b: vec![0.0; 3],
        }
    }

    pub fn init(hidden: usize, tau_min: f64, tau_max: f64, rng: &mut impl Rng) -> Self {
        let cell = LtcCellParams::init(hidden, tau_min, tau_max, rng);
        let normal = Normal::new(0.0, 0.1 / (hidden as f64).sqrt()).expect("valid std");
        let head_w = (0..3 * hidden).map(|_| normal.sample(rng)).collect();
        Self {
            cell,
            head_w,
            head_b: vec![0.0; 3],
        }
    }

    pub fn hidden(&self) -> usize {
        self.cell.hidden
    }

    pub fn blocks(&self) -> [&[f64]; 7] {
        [
            &self.cell.log_tau,
            &self.cell.a,
            &self.cell.w_in,
            &self.cell.w_rec,
            &self.cell.b,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 7] {
        [
            &mut self.cell.log_tau,
            &mut self.cell.a,
            &mut self.cell.w_in,
            &mut self.cell.w_rec,
            &mut self.cell.b,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        for block in self.blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }

    pub fn add_scaled(&mut self, other: &EstimatorParams, s: f64) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, v) in dst.iter_mut().zip(src) {
                *d += s * v;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for block in self.blocks_mut() {
            for v in block {
                *v *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        self.cell.validate()?;
        let h = self.hidden();
        if self.head_w.len() != 3 * h || self.head_b.len() != 3 {
            return Err(EstimatorError::InvalidParams(
                "head shape does not match hidden width".into(),
            ));
        }
        if !self.is_finite() {
            return Err(EstimatorError::InvalidParams(
                "non-finite head parameter".into(),
            ));
        }
        Ok(())
    }
}

/// LTC encoder, sigmoid head and range map; decoding uses the trace protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorNetwork {
    pub params: EstimatorParams,
    pub ranges: CoefficientRanges,
    pub protocol: TraceProtocol,
    /// LTC sub-steps per input sample.
    pub unfolds: usize,
    /// Coefficients pinned to a known value instead of estimated, in `(k1, n, p1)` order.
    #[serde(default)]
    pub frozen: [Option<f64>; 3],
}

pub const CHECKPOINT_FORMAT: &str = "aidplan-ltc-estimator";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub hidden: usize,
    pub network: EstimatorNetwork,
    pub training_config_hash: String,
}

struct Forward {
    caches: Vec<super::ltc::StepCache>,
    h_final: Vec<f64>,
    out: [f64; 3],
    coeffs: Coefficients,
}

impl EstimatorNetwork {
    pub fn new(
        params: EstimatorParams,
        ranges: CoefficientRanges,
        protocol: TraceProtocol,
    ) -> Self {
        Self {
            params,
            ranges,
            protocol,
            unfolds: 1,
            frozen: [None; 3],
        }
    }

    pub fn hidden(&self) -> usize {
        self.params.hidden()
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        self.params.validate()?;
        self.protocol.validate()?;
        if self.unfolds == 0 {
            return Err(EstimatorError::InvalidConfig("unfolds must be >= 1".into()));
        }
        for iv in self.ranges.as_array() {
            if !(iv.lo > 0.0 && iv.lo < iv.hi && iv.hi.is_finite()) {
                return Err(EstimatorError::InvalidConfig(format!(
                    "bad range [{}, {}]",
                    iv.lo, iv.hi
                )));
            }
        }
        Ok(())
    }

    fn head(&self, h: &[f64]) -> [f64; 3] {
        let n = self.hidden();
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.params.head_w[k * n..(k + 1) * n];
            *o =
                sigmoid(row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>() + self.params.head_b[k]);
        }
        out
    }

    fn map(&self, out: &[f64; 3]) -> Coefficients {
        let r = self.ranges.as_array();
        let v = |k: usize| self.frozen[k].unwrap_or_else(|| r[k].from_unit(out[k]));
        Coefficients {
            k1: v(0),
            n: v(1),
            p1: v(2),
            i_b: self.protocol.i_b,
        }
    }

    /// Coefficients for an IOB sample sequence at the protocol's sampling period.
    pub fn encode(&self, iob: &[f64]) -> Result<Coefficients, EstimatorError> {
        if iob.len() < 2 {
            return Err(EstimatorError::TraceTooShort(iob.len()));
        }
        if iob.iter().any(|v| !v.is_finite()) {
            return Err(EstimatorError::InvalidInput("non-finite IOB sample".into()));
        }
        let h = run_final(&self.params.cell, iob, self.protocol.dt, self.unfolds);
        Ok(self.map(&self.head(&h)))
    }

    fn forward(&self, iob: &[f64]) -> Forward {
        let caches = run_cached(&self.params.cell, iob, self.protocol.dt, self.unfolds);
        let h_final = caches
            .last()
            .map_or_else(|| vec![0.0; self.hidden()], |c| c.h_next.clone());
        let out = self.head(&h_final);
        let coeffs = self.map(&out);
        Forward {
            caches,
            h_final,
            out,
            coeffs,
        }
    }

    /// Reconstruction RMSE of `observed` through encode + decode.
    pub fn reconstruction_loss(&self, observed: &[f64]) -> Result<f64, EstimatorError> {
        let c = self.encode(observed)?;
        let (rec, _) = decode_with_tangents(&c, &self.protocol)?;
        loss(&rec, observed)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        observed: &[f64],
    ) -> Result<(f64, EstimatorParams), EstimatorError> {
        let expected = self.protocol.samples();
        if observed.len() != expected {
            return Err(EstimatorError::LengthMismatch {
                left: observed.len(),
                right: expected,
            });
        }
        let fw = self.forward(observed);
        let (rec, tangents) = decode_with_tangents(&fw.coeffs, &self.protocol)?;
        let l = loss(&rec, observed)?;
        let mut grad = EstimatorParams::zeros(self.hidden());
        if l == 0.0 {
            return Ok((l, grad));
        }
        let scale = 1.0 / (rec.len() as f64 * l);
        let mut dc = [0.0; 3];
        for ((r, o), t) in rec.iter().zip(observed).zip(&tangents) {
            let g = (r - o) * scale;
            for k in 0..3 {
                dc[k] += g * t[k];
            }
        }
        let n = self.hidden();
        let ranges = self.ranges.as_array();
        let mut dh = vec![0.0; n];
        for k in 0..3 {
            if self.frozen[k].is_some() {
                continue;
            }
            let o = fw.out[k];
            let dz = dc[k] * ranges[k].width() * o * (1.0 - o);
            grad.head_b[k] += dz;
            let row = k * n;
            for j in 0..n {
                grad.head_w[row + j] += dz * fw.h_final[j];
                dh[j] += self.params.head_w[row + j] * dz;
            }
        }
        backward(&self.params.cell, &fw.caches, &dh, &mut grad.cell);
        Ok((l, grad))
    }

    /// Estimate coefficients from the IOB channel of a trace recorded under the
    /// network's protocol. A trace sampled at a different period is linearly
    /// interpolated onto the protocol grid when `resample` is set and
    /// rejected otherwise. Samples past the protocol horizon are ignored.
    pub fn estimate_coefficients(
        &self,
        trace: &Trace,
        resample: bool,
    ) -> Result<Coefficients, EstimatorError> {
        let dt = self.protocol.dt;
        let mut iob = trace.iob();
        if (trace.dt() - dt).abs() > 1e-9 * dt {
            if !resample {
                return Err(EstimatorError::SamplingMismatch {
                    trace: trace.dt(),
                    expected: dt,
                });
            }
            iob = resample_linear(&iob, trace.dt(), dt);
        }
        iob.truncate(self.protocol.samples());
        self.encode(&iob)
    }

    pub fn save(&self, path: &Path, training_config_hash: &str) -> Result<(), EstimatorError> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            hidden: self.hidden(),
            network: self.clone(),
            training_config_hash: training_config_hash.into(),
        };
        let text = serde_json::to_string(&ck).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| EstimatorError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<(Self, String), EstimatorError> {
        let text = std::fs::read_to_string(path).map_err(|e| EstimatorError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| EstimatorError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(EstimatorError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.hidden != ck.network.hidden() {
            return Err(EstimatorError::Checkpoint(
                "hidden width does not match parameters".into(),
            ));
        }
        ck.network.validate()?;
        Ok((ck.network, ck.training_config_hash))
    }
}

/// Root mean square difference.
pub fn loss(reconstructed: &[f64], observed: &[f64]) -> Result<f64, EstimatorError> {
    if reconstructed.len() != observed.len() {
        return Err(EstimatorError::LengthMismatch {
            left: reconstructed.len(),
            right: observed.len(),
        });
    }
    if reconstructed.is_empty() {
        return Err(EstimatorError::InvalidInput("empty trace".into()));
    }
    let sq: f64 = reconstructed
        .iter()
        .zip(observed)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sq / reconstructed.len() as f64).sqrt())
}

/// Linear interpolation of samples spaced `from` onto a grid spaced `to`.
pub fn resample_linear(values: &[f64], from: f64, to: f64) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let span = (values.len() - 1) as f64 * from;
    let count = (span / to + 1e-9).floor() as usize + 1;
    (0..count)
        .map(|i| {
            let x = i as f64 * to / from;
            let j = (x.floor() as usize).min(values.len() - 1);
            if j + 1 >= values.len() {
                return values[j];
            }
            let w = x - j as f64;
            values[j] * (1.0 - w) + values[j + 1] * w
        })
        .collect()
}
