use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::decoder::{decode_protocol, TraceProtocol};
use super::EstimatorError;
use crate::dynamics::{Coefficients, Interval, PlantState, Sample, Trace};
use crate::provenance::config_hash;

/// Uniform sampler for ground-truth coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSampler {
    pub k1: Interval,
    pub n: Interval,
    pub p1: Interval,
}

impl Default for CoefficientSampler {
    fn default() -> Self {
        Self {
            k1: Interval::new(0.05, 0.15),
            n: Interval::new(0.10, 0.18),
            p1: Interval::new(0.015, 0.04),
        }
    }
}

impl CoefficientSampler {
    pub fn fixed(c: &Coefficients) -> Self {
        Self {
            k1: Interval::new(c.k1, c.k1),
            n: Interval::new(c.n, c.n),
            p1: Interval::new(c.p1, c.p1),
        }
    }

    pub fn draw(&self, rng: &mut impl Rng, i_b: f64) -> Coefficients {
        let mut u = |iv: Interval| iv.from_unit(rng.random::<f64>());
        Coefficients {
            k1: u(self.k1),
            n: u(self.n),
            p1: u(self.p1),
            i_b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub coeffs: Coefficients,
    pub iob: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub count: usize,
    pub seed: u64,
    pub sampler: CoefficientSampler,
    pub protocol: TraceProtocol,
    /// Standard deviation of additive Gaussian noise on each IOB sample.
    pub noise_std: f64,
}

/// IOB traces with their hidden ground-truth coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDataset {
    pub spec: DatasetSpec,
    pub traces: Vec<TraceRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    k1: f64,
    n: f64,
    p1: f64,
    i_b: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    spec: DatasetSpec,
    config_hash: String,
    traces: Vec<ManifestEntry>,
}

const MANIFEST_FORMAT: &str = "aidplan-iob-dataset-v1";

impl TraceDataset {
    /// Draw coefficients and noise sequentially from one seeded stream, then
    /// simulate in parallel; the result does not depend on the thread count.
    pub fn generate(spec: &DatasetSpec) -> Result<Self, EstimatorError> {
        if spec.count == 0 {
            return Err(EstimatorError::InvalidConfig(
                "dataset needs at least one trace".into(),
            ));
        }
        if !(spec.noise_std.is_finite() && spec.noise_std >= 0.0) {
            return Err(EstimatorError::InvalidConfig(
                "noise_std must be >= 0".into(),
            ));
        }
        spec.protocol.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n = spec.protocol.samples();
        let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
        let draws: Vec<(Coefficients, Vec<f64>)> = (0..spec.count)
            .map(|_| {
                let c = spec.sampler.draw(&mut rng, spec.protocol.i_b);
                let eps: Vec<f64> = if spec.noise_std > 0.0 {
                    (0..n).map(|_| noise.sample(&mut rng)).collect()
                } else {
                    vec![0.0; n]
                };
                (c, eps)
            })
            .collect();
        let traces = draws
            .into_par_iter()
            .map(|(coeffs, eps)| {
                let mut iob = decode_protocol(&coeffs, &spec.protocol)?;
                for (v, e) in iob.iter_mut().zip(eps) {
                    *v += e;
                }
                Ok(TraceRecord { coeffs, iob })
            })
            .collect::<Result<Vec<_>, EstimatorError>>()?;
        Ok(Self {
            spec: *spec,
            traces,
        })
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// Write `traces/trace_NNNNN.csv` files plus `manifest.json` under `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), EstimatorError> {
        let io = |p: &Path, e: std::io::Error| EstimatorError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        };
        let traces_dir = dir.join("traces");
        std::fs::create_dir_all(&traces_dir).map_err(|e| io(&traces_dir, e))?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, rec) in self.traces.iter().enumerate() {
            let file = format!("traces/trace_{i:05}.csv");
            let samples = rec
                .iob
                .iter()
                .map(|&v| Sample {
                    state: PlantState::new(0.0, 0.0, v, 0.0),
                    u: 0.0,
                    s: 0.0,
                })
                .collect();
            let trace = Trace::new(0.0, self.spec.protocol.dt, samples)?;
            trace.write_csv(&dir.join(&file))?;
            entries.push(ManifestEntry {
                file,
                k1: rec.coeffs.k1,
                n: rec.coeffs.n,
                p1: rec.coeffs.p1,
                i_b: rec.coeffs.i_b,
            });
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            spec: self.spec,
            config_hash: config_hash(&self.spec),
            traces: entries,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| io(&path, e))
    }

    pub fn read_dir(dir: &Path) -> Result<Self, EstimatorError> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| EstimatorError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| EstimatorError::InvalidConfig(format!("{}: {e}", path.display())))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(EstimatorError::InvalidConfig(format!(
                "unknown dataset format `{}`",
                manifest.format
            )));
        }
        let traces = manifest
            .traces
            .iter()
            .map(|e| {
                let trace = Trace::read_csv(&dir.join(&e.file))?;
                Ok(TraceRecord {
                    coeffs: Coefficients::new(e.k1, e.n, e.p1, e.i_b)?,
                    iob: trace.iob(),
                })
            })
            .collect::<Result<Vec<_>, EstimatorError>>()?;
        Ok(Self {
            spec: manifest.spec,
            traces,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            count: 5,
            seed,
            sampler: CoefficientSampler::default(),
            protocol: TraceProtocol {
                horizon: 30.0,
                ..Default::default()
            },
            noise_std: 0.001,
        }
    }

    #[test]
    fn seeded_generation_repeats() {
        let a = TraceDataset::generate(&spec(3)).unwrap();
        assert_eq!(a, TraceDataset::generate(&spec(3)).unwrap());
        assert_ne!(a, TraceDataset::generate(&spec(4)).unwrap());
        assert_eq!(a.traces[0].iob.len(), 31);
    }

    #[test]
    fn directory_round_trip() {
        let ds = TraceDataset::generate(&spec(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path()).unwrap();
        let back = TraceDataset::read_dir(dir.path()).unwrap();
        assert_eq!(back, ds);
    }
}
