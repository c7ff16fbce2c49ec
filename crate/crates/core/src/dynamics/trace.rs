use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::PlantState;
use super::DynamicsError;

pub const TRACE_CSV_HEADER: &str = "t_min,y,z,iob,glucose,u,s";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub state: PlantState,
    /// Insulin rate applied from this sample on (U/min).
    pub u: f64,
    /// Active set point (mg/dl).
    pub s: f64,
}

/// Uniformly sampled plant trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrace")]
pub struct Trace {
    t0: f64,
    dt: f64,
    samples: Vec<Sample>,
}

#[derive(Deserialize)]
struct RawTrace {
    t0: f64,
    dt: f64,
    samples: Vec<Sample>,
}

impl TryFrom<RawTrace> for Trace {
    type Error = DynamicsError;

    fn try_from(r: RawTrace) -> Result<Self, Self::Error> {
        Trace::new(r.t0, r.dt, r.samples)
    }
}

impl Trace {
    pub fn new(t0: f64, dt: f64, samples: Vec<Sample>) -> Result<Self, DynamicsError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(DynamicsError::Trace(format!(
                "sampling period must be positive (got {dt})"
            )));
        }
        if !t0.is_finite() {
            return Err(DynamicsError::Trace("start time must be finite".into()));
        }
        if samples.is_empty() {
            return Err(DynamicsError::Trace("trace has no samples".into()));
        }
        Ok(Self { t0, dt, samples })
    }

    /// Trace of glucose values only; other channels are zero.
    pub fn from_glucose(t0: f64, dt: f64, glucose: &[f64]) -> Result<Self, DynamicsError> {
        let samples = glucose
            .iter()
            .map(|&g| Sample {
                state: PlantState::new(0.0, 0.0, 0.0, g),
                u: 0.0,
                s: 0.0,
            })
            .collect();
        Self::new(t0, dt, samples)
    }

    /// Trace of IOB values only.
    pub fn from_iob(t0: f64, dt: f64, iob: &[f64]) -> Result<Self, DynamicsError> {
        let samples = iob
            .iter()
            .map(|&v| Sample {
                state: PlantState::new(0.0, 0.0, v, 0.0),
                u: 0.0,
                s: 0.0,
            })
            .collect();
        Self::new(t0, dt, samples)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn last(&self) -> &Sample {
        self.samples.last().expect("trace is nonempty")
    }

    pub fn time_at(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.time_at(self.samples.len() - 1)
    }

    pub fn span(&self) -> f64 {
        self.t_end() - self.t0
    }

    pub fn iob(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.state.iob).collect()
    }

    pub fn glucose(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.state.glucose).collect()
    }

    /// Sub-trace of the samples whose times fall within `[from, to]`.
    pub fn window(&self, from: f64, to: f64) -> Result<Trace, DynamicsError> {
        let first = ((from - self.t0) / self.dt - 1e-9).ceil().max(0.0) as usize;
        let last = (((to - self.t0) / self.dt + 1e-9).floor() as isize)
            .min(self.samples.len() as isize - 1);
        if last < first as isize {
            return Err(DynamicsError::Trace(format!(
                "no samples in [{from}, {to}]"
            )));
        }
        Trace::new(
            self.time_at(first),
            self.dt,
            self.samples[first..=last as usize].to_vec(),
        )
    }

    /// Keep every `stride`-th sample.
    pub fn subsample(&self, stride: usize) -> Trace {
        let stride = stride.max(1);
        let samples = self.samples.iter().step_by(stride).copied().collect();
        Trace {
            t0: self.t0,
            dt: self.dt * stride as f64,
            samples,
        }
    }

    /// Keep at most `max_points` samples by uniform striding (first sample always kept).
    pub fn downsample(&self, max_points: usize) -> Trace {
        if max_points == 0 || self.len() <= max_points {
            return self.clone();
        }
        let stride = self.len().div_ceil(max_points);
        self.subsample(stride)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.len() + 1));
        out.push_str(TRACE_CSV_HEADER);
        out.push('\n');
        for (i, s) in self.samples.iter().enumerate() {
            let p = &s.state;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.time_at(i),
                p.y,
                p.z,
                p.iob,
                p.glucose,
                s.u,
                s.s
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DynamicsError> {
        let io = |e: std::io::Error| DynamicsError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        f.write_all(self.to_csv().as_bytes()).map_err(io)?;
        f.flush().map_err(io)
    }

    pub fn read_csv(path: &Path) -> Result<Self, DynamicsError> {
        let f = std::fs::File::open(path).map_err(|e| DynamicsError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse_csv(std::io::BufReader::new(f))
    }

    /// Parse the trace CSV format. Sampling must be uniform.
    pub fn parse_csv(reader: impl BufRead) -> Result<Self, DynamicsError> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| DynamicsError::Trace("empty trace file".into()))?
            .map_err(|e| DynamicsError::Trace(e.to_string()))?;
        if header.trim() != TRACE_CSV_HEADER {
            return Err(DynamicsError::Trace(format!(
                "expected header `{TRACE_CSV_HEADER}`, got `{}`",
                header.trim()
            )));
        }
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| DynamicsError::Trace(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Result<Vec<f64>, _> =
                line.split(',').map(|f| f.trim().parse::<f64>()).collect();
            let fields =
                fields.map_err(|e| DynamicsError::Trace(format!("line {}: {e}", lineno + 2)))?;
            if fields.len() != 7 {
                return Err(DynamicsError::Trace(format!(
                    "line {}: expected 7 fields, got {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            times.push(fields[0]);
            samples.push(Sample {
                state: PlantState::new(fields[1], fields[2], fields[3], fields[4]),
                u: fields[5],
                s: fields[6],
            });
        }
        if samples.is_empty() {
            return Err(DynamicsError::Trace("trace has no samples".into()));
        }
        let t0 = times[0];
        let dt = if times.len() > 1 {
            times[1] - times[0]
        } else {
            1.0
        };
        for (i, t) in times.iter().enumerate() {
            let expected = t0 + i as f64 * dt;
            if (t - expected).abs() > 1e-6 * dt.abs().max(1.0) {
                return Err(DynamicsError::Trace(format!(
                    "non-uniform sampling at row {} (t = {t})",
                    i + 1
                )));
            }
        }
        Trace::new(t0, dt, samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let samples = (0..5)
            .map(|i| Sample {
                state: PlantState::new(
                    i as f64 * 0.1,
                    -0.01,
                    1.0 / (i + 1) as f64,
                    100.0 + i as f64,
                ),
                u: 0.0125,
                s: 90.0,
            })
            .collect();
        let trace = Trace::new(-30.0, 5.0, samples).unwrap();
        let text = trace.to_csv();
        assert!(text.starts_with("t_min,y,z,iob,glucose,u,s\n"));
        let back = Trace::parse_csv(text.as_bytes()).unwrap();
        assert_eq!(back, trace);
    }

    #[test]
    fn rejects_wrong_header_and_gaps() {
        assert!(Trace::parse_csv("t,y\n0,1\n".as_bytes()).is_err());
        let gap =
            format!("{TRACE_CSV_HEADER}\n0,0,0,1,100,0,90\n1,0,0,1,100,0,90\n3,0,0,1,100,0,90\n");
        assert!(Trace::parse_csv(gap.as_bytes()).is_err());
    }

    #[test]
    fn window_and_downsample() {
        let trace = Trace::from_glucose(0.0, 1.0, &(0..1000).map(|i| i as f64).collect::<Vec<_>>())
            .unwrap();
        let w = trace.window(10.0, 20.0).unwrap();
        assert_eq!(w.len(), 11);
        assert_eq!(w.t0(), 10.0);
        let d = trace.downsample(500);
        assert!(d.len() <= 500);
        assert_eq!(d.dt(), 2.0);
        assert!(Trace::new(0.0, 0.0, vec![]).is_err());
    }

    #[test]
    fn json_goes_through_validation() {
        let tr = Trace::from_iob(0.0, 1.0, &[1.0, 0.5]).unwrap();
        let text = serde_json::to_string(&tr).unwrap();
        assert_eq!(serde_json::from_str::<Trace>(&text).unwrap(), tr);
        assert!(serde_json::from_str::<Trace>(r#"{"t0":0,"dt":1,"samples":[]}"#).is_err());
        assert!(serde_json::from_str::<Trace>(&text.replace("\"dt\":1.0", "\"dt\":-1.0")).is_err());
    }
}
