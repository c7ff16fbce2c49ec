use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LlmError;
use crate::dynamics::{simulate_insulin, Coefficients, Interval, PlantState};

pub const INVERSE_SYSTEM_PROMPT: &str = "Below is an instruction that describes the task of finding the diffusion parameter of the Bergman Minimal Model paired with a time series of {count} Insulin on Board.";

pub const FORWARD_SYSTEM_PROMPT: &str = "Below is an instruction that describes the task of finding the Insulin On Board of a type 1 diabetic patient paired with a diffusion parameter of the Bergman Minimal Model for an insulin intake. Write a corresponding output that is the Insulin On Board timeseries.";

pub const FORWARD_INSTRUCTION: &str =
    "I took an insulin dosage now. What is my Insulin On Board percentage timeseries?";

pub const INVERSE_INSTRUCTION: &str = "Find out the diffusion parameter from the Bergman Minimal Model with the following time series. The {count} values corresponding to {seconds} seconds of IOB values";

pub const DIFFUSION_FIELD: &str = "diffusion_parameter";

/// Instruction / input / response triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlpacaRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

impl AlpacaRecord {
    /// Full prompt text with the section markers. The response section is
    /// left open when `with_output` is false. Assignment-style inputs
    /// (`name = value`) go on their own line, series follow the marker.
    pub fn render(&self, system: &str, with_output: bool) -> String {
        let mut s = String::new();
        if !system.is_empty() {
            s.push_str(system);
            s.push('\n');
        }
        s.push_str("### Instruction: ");
        s.push_str(&self.instruction);
        s.push('\n');
        s.push_str("### Input:");
        if self.input.contains('\n') || self.input.contains('=') {
            s.push('\n');
        } else {
            s.push(' ');
        }
        s.push_str(&self.input);
        s.push('\n');
        s.push_str("### Response:");
        if with_output {
            s.push(' ');
            s.push_str(&self.output);
        }
        s
    }
}

/// Sampling of the IOB series embedded in prompts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeriesSpec {
    pub sample_count: usize,
    /// s
    pub sample_period: f64,
    pub initial_iob: f64,
    pub significant_digits: usize,
}

impl Default for SeriesSpec {
    fn default() -> Self {
        Self {
            sample_count: 40,
            sample_period: 10.0,
            initial_iob: 1.0,
            significant_digits: 5,
        }
    }
}

impl SeriesSpec {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.sample_count < 2 {
            return Err(LlmError::InvalidConfig("sample_count must be >= 2".into()));
        }
        if !(self.sample_period.is_finite() && self.sample_period > 0.0) {
            return Err(LlmError::InvalidConfig("sample_period must be > 0".into()));
        }
        if !(self.initial_iob.is_finite() && self.initial_iob > 0.0) {
            return Err(LlmError::InvalidConfig("initial_iob must be > 0".into()));
        }
        if !(1..=17).contains(&self.significant_digits) {
            return Err(LlmError::InvalidConfig(
                "significant_digits must be in 1..=17".into(),
            ));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        (self.sample_count - 1) as f64 * self.sample_period
    }
}

/// Insulin model behind prompt series. Rates are per second; only `k1`
/// varies between prompts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptModel {
    /// 1/s
    pub n: f64,
    /// 1/s
    pub p1: f64,
    pub i_b: f64,
    /// Initial depot level relative to `iob(0) = 1`.
    pub y0: f64,
    /// Internal integration step (s).
    pub step: f64,
}

impl Default for PromptModel {
    fn default() -> Self {
        Self {
            n: 0.231562,
            p1: 0.0931,
            i_b: 2.23325,
            y0: 0.254215,
            step: 1.0,
        }
    }
}

impl PromptModel {
    pub fn coefficients(&self, k1: f64) -> Result<Coefficients, LlmError> {
        Ok(Coefficients::new(k1, self.n, self.p1, self.i_b)?)
    }

    /// IOB series for `k1`, scaled to start at `spec.initial_iob`.
    pub fn series(&self, k1: f64, spec: &SeriesSpec) -> Result<Vec<f64>, LlmError> {
        spec.validate()?;
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(LlmError::InvalidConfig(
                "prompt model step must be > 0".into(),
            ));
        }
        let c = self.coefficients(k1)?;
        let sub = (spec.sample_period / self.step).ceil().max(1.0) as usize;
        let h = spec.sample_period / sub as f64;
        let trace = simulate_insulin(
            &PlantState::new(self.y0, 0.0, 1.0, 100.0),
            &c,
            spec.duration(),
            h,
        )?;
        Ok(trace
            .iob()
            .into_iter()
            .step_by(sub)
            .take(spec.sample_count)
            .map(|v| v * spec.initial_iob)
            .collect())
    }
}

/// Decimal text with `digits` significant digits and at least one digit
/// after the point: `0.999480001 -> "0.99948"`, `1 -> "1.0"`.
pub fn format_value(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0.0".into();
    }
    let digits = digits.clamp(1, 17);
    let sci = format!("{:.*e}", digits - 1, x);
    let (_, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let rounded: f64 = sci.parse().expect("valid float");
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    let mut s = format!("{rounded:.decimals$}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.push('0');
        }
    } else {
        s.push_str(".0");
    }
    s
}

pub fn format_series(values: &[f64], digits: usize, separator: &str) -> String {
    values
        .iter()
        .map(|&v| format_value(v, digits))
        .collect::<Vec<_>>()
        .join(separator)
}

fn fill(template: &str, spec: &SeriesSpec) -> String {
    let seconds = spec.sample_count as f64 * spec.sample_period;
    let seconds = if seconds.fract() == 0.0 {
        format!("{}", seconds as u64)
    } else {
        seconds.to_string()
    };
    template
        .replace("{count}", &spec.sample_count.to_string())
        .replace("{seconds}", &seconds)
}

pub fn inverse_system_prompt(spec: &SeriesSpec) -> String {
    fill(INVERSE_SYSTEM_PROMPT, spec)
}

/// Forward query: the model should answer with the IOB series for `k1`.
pub fn forward_record(k1: f64, spec: &SeriesSpec) -> AlpacaRecord {
    AlpacaRecord {
        instruction: FORWARD_INSTRUCTION.into(),
        input: format!(
            "{DIFFUSION_FIELD} = {}",
            format_value(k1, spec.significant_digits)
        ),
        output: String::new(),
    }
}

pub fn format_forward_prompt(k1: f64, spec: &SeriesSpec) -> String {
    forward_record(k1, spec).render(FORWARD_SYSTEM_PROMPT, false)
}

/// Response text in the form the fine-tuned model produces.
pub fn format_series_response(values: &[f64], spec: &SeriesSpec) -> String {
    format!(
        "Your timeseries is {}",
        format_series(values, spec.significant_digits, ", ")
    )
}

/// Training record asking for `k1` given its IOB series.
pub fn format_inverse_record(
    series: &[f64],
    k1: f64,
    spec: &SeriesSpec,
) -> Result<AlpacaRecord, LlmError> {
    if series.len() != spec.sample_count {
        return Err(LlmError::LengthMismatch {
            expected: spec.sample_count,
            got: series.len(),
        });
    }
    Ok(AlpacaRecord {
        instruction: fill(INVERSE_INSTRUCTION, spec),
        input: format_series(series, spec.significant_digits, " "),
        output: format_value(k1, spec.significant_digits),
    })
}

/// Worked bolus questions shown to a chat model before the real query.
pub const BOLUS_CONTEXT: &str = "Q1: I am eating 30g carbs. Carb ratio is 5. Insulin on board is 3 U. How much bolus should I take?
Answer: You should take 3 U bolus
Q2: I am eating 20g carbs. Carb ratio is 5. Insulin on board is 1 U. How much bolus should I take?
Answer: You should take 3 U bolus
Q3: I am eating 7g carbs to avoid hypoglycemia. Carb ratio is 5. Insulin on board is 2 U. How much bolus should I take?
Answer: You should take 0 U bolus
Q4: I am eating 60g carbs. Carb ratio is 5. Insulin on board is 4 U. How much bolus should I take?
Answer: You should take 8 U bolus
Q5: I am eating 25g carbs. Carb ratio is 5. Insulin on board is 3 U. How much bolus should I take?
Answer: You should take 2 U bolus
Q6: I am eating 7g carbs to avoid hypoglycemia. Carb ratio is 5. Insulin on board is 1 U. How much bolus should I take?
Answer: You should take 0 U bolus";

/// Number without trailing zeros, at most two decimals: `2 -> "2"`, `1.25 -> "1.25"`.
pub(crate) fn plain_number(x: f64) -> String {
    let s = format!("{:.2}", x);
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Contextualized bolus question for a chat model.
pub fn format_bolus_prompt(carbs: f64, cr: f64, iob: f64) -> String {
    format!(
        "{BOLUS_CONTEXT}\nI am eating {} g carbs. Carb ratio is {}. Insulin on board is {} U. How much bolus should I take?",
        plain_number(carbs),
        plain_number(cr),
        plain_number(iob)
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    /// Series in, coefficient out.
    Inverse,
    /// Coefficient in, series out.
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptDatasetSpec {
    pub count: usize,
    pub seed: u64,
    /// Range of the per-second diffusion parameter.
    pub k1: Interval,
    pub kind: PromptKind,
    pub series: SeriesSpec,
    pub model: PromptModel,
}

impl Default for PromptDatasetSpec {
    fn default() -> Self {
        Self {
            count: 1000,
            seed: 1,
            k1: Interval::new(0.005, 0.05),
            kind: PromptKind::Inverse,
            series: SeriesSpec::default(),
            model: PromptModel::default(),
        }
    }
}

/// The dataset's diffusion parameters, already rounded to prompt precision.
pub fn draw_k1(spec: &PromptDatasetSpec) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.count)
        .map(|_| {
            let raw = spec.k1.from_unit(rng.random::<f64>());
            format_value(raw, spec.series.significant_digits)
                .parse()
                .expect("formatted value parses")
        })
        .collect()
}

/// Seeded prompt records; `k1` is rounded to the prompt precision before
/// simulating so each record's series matches its stated coefficient.
pub fn generate_prompt_dataset(spec: &PromptDatasetSpec) -> Result<Vec<AlpacaRecord>, LlmError> {
    if spec.count == 0 {
        return Err(LlmError::InvalidConfig(
            "dataset needs at least one record".into(),
        ));
    }
    spec.series.validate()?;
    if !(spec.k1.lo > 0.0 && spec.k1.lo <= spec.k1.hi) {
        return Err(LlmError::InvalidConfig(
            "k1 range must be positive and ordered".into(),
        ));
    }
    draw_k1(spec)
        .into_iter()
        .map(|k1| {
            let series = spec.model.series(k1, &spec.series)?;
            match spec.kind {
                PromptKind::Inverse => format_inverse_record(&series, k1, &spec.series),
                PromptKind::Forward => {
                    let mut rec = forward_record(k1, &spec.series);
                    rec.output = format_series_response(&series, &spec.series);
                    Ok(rec)
                }
            }
        })
        .collect()
}

/// One JSON object per line with keys `instruction`, `input`, `output`.
pub fn write_jsonl(path: &Path, records: &[AlpacaRecord]) -> Result<(), LlmError> {
    let io = |e: std::io::Error| LlmError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<AlpacaRecord>, LlmError> {
    let text = std::fs::read_to_string(path).map_err(|e| LlmError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| LlmError::Malformed(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
