use super::parse::{parse_field, parse_series_response};
use super::prompt::{
    format_series_response, format_value, plain_number, PromptModel, SeriesSpec, DIFFUSION_FIELD,
};
use super::{LlmError, Responder};
use crate::planner::compute_bolus;

/// Offline stand-in for the fine-tuned model: answers forward prompts by
/// simulation, inverse prompts by a one-dimensional least-squares fit and
/// bolus questions with the standard formula.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LocalOracle {
    pub model: PromptModel,
    pub spec: SeriesSpec,
}

impl LocalOracle {
    pub fn new(model: PromptModel, spec: SeriesSpec) -> Self {
        Self { model, spec }
    }

    fn forward(&self, k1: f64) -> Result<String, LlmError> {
        if !(k1.is_finite() && k1 > 0.0) {
            return Err(LlmError::Parse(format!(
                "{DIFFUSION_FIELD} must be > 0 (got {k1})"
            )));
        }
        let series = self.model.series(k1, &self.spec)?;
        Ok(format_series_response(&series, &self.spec))
    }

    /// k1 minimizing the RMSE to `series`, by golden-section search in log k1.
    pub fn fit_k1(&self, series: &[f64]) -> Result<f64, LlmError> {
        let spec = SeriesSpec {
            sample_count: series.len(),
            ..self.spec
        };
        let cost = |log_k: f64| -> Result<f64, LlmError> {
            let sim = self.model.series(log_k.exp(), &spec)?;
            Ok(sim.iter().zip(series).map(|(a, b)| (a - b) * (a - b)).sum())
        };
        let (mut lo, mut hi) = (1e-4f64.ln(), 0.5f64.ln());
        // coarse scan first so the bracket holds the global minimum
        let grid: Vec<f64> = (0..=40).map(|i| lo + (hi - lo) * i as f64 / 40.0).collect();
        let costs = grid
            .iter()
            .map(|&g| cost(g))
            .collect::<Result<Vec<_>, _>>()?;
        let best = costs
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("non-empty grid");
        lo = grid[best.saturating_sub(1)];
        hi = grid[(best + 1).min(grid.len() - 1)];
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let (mut a, mut b) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
        let (mut fa, mut fb) = (cost(a)?, cost(b)?);
        for _ in 0..80 {
            if fa < fb {
                hi = b;
                b = a;
                fb = fa;
                a = hi - phi * (hi - lo);
                fa = cost(a)?;
            } else {
                lo = a;
                a = b;
                fa = fb;
                b = lo + phi * (hi - lo);
                fb = cost(b)?;
            }
        }
        Ok((0.5 * (lo + hi)).exp())
    }

    fn bolus(&self, prompt: &str) -> Option<Result<String, LlmError>> {
        let q = &prompt[prompt.rfind("I am eating")?..];
        let number_after = |label: &str| -> Option<f64> {
            let rest = q[q.find(label)? + label.len()..].trim_start();
            let end = rest
                .find(|c: char| !(c.is_ascii_digit() || c == '.'))
                .unwrap_or(rest.len());
            rest[..end].trim_end_matches('.').parse().ok()
        };
        let carbs = number_after("I am eating")?;
        let cr = number_after("Carb ratio is")?;
        let iob = number_after("Insulin on board is")?;
        Some(
            compute_bolus(carbs, cr, iob)
                .map(|u| format!("You should take {} U bolus", plain_number(u)))
                .map_err(|e| LlmError::Parse(e.to_string())),
        )
    }
}

impl Responder for LocalOracle {
    fn name(&self) -> String {
        "local-oracle".into()
    }

    fn respond(&self, prompt: &str) -> Result<String, LlmError> {
        match parse_field(prompt, DIFFUSION_FIELD) {
            Ok(k1) => return self.forward(k1),
            Err(LlmError::MissingField(_)) => {}
            Err(e) => return Err(e),
        }
        if let Some(answer) = self.bolus(prompt) {
            return answer;
        }
        if let Some(p) = prompt.rfind("### Input:") {
            let end = prompt[p..]
                .find("### Response")
                .map_or(prompt.len(), |e| p + e);
            if let Ok(series) = parse_series_response(&prompt[p + "### Input:".len()..end]) {
                if series.len() >= 2 {
                    let k1 = self.fit_k1(&series)?;
                    return Ok(format_value(k1, self.spec.significant_digits));
                }
            }
        }
        Err(LlmError::MissingField(DIFFUSION_FIELD.into()))
    }
}

/// Responder backed by a closure; handy for scripted or faulty models.
pub struct FnResponder<F> {
    pub name: String,
    pub f: F,
}

impl<F> Responder for FnResponder<F>
where
    F: Fn(&str) -> Result<String, LlmError> + Send + Sync,
{
    fn name(&self) -> String {
        self.name.clone()
    }

    fn respond(&self, prompt: &str) -> Result<String, LlmError> {
        (self.f)(prompt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{
        evaluate_rmse, format_bolus_prompt, format_forward_prompt, format_inverse_record,
        inverse_system_prompt,
    };

    #[test]
    fn forward_round_trip_is_exact_to_print_precision() {
        let oracle = LocalOracle::default();
        for k1 in [0.015, 0.025, 0.0196] {
            let answer = oracle
                .respond(&format_forward_prompt(k1, &oracle.spec))
                .unwrap();
            assert!(answer.starts_with("Your timeseries is 1.0, "));
            let parsed = parse_series_response(&answer).unwrap();
            let direct = oracle.model.series(k1, &oracle.spec).unwrap();
            assert_eq!(parsed.len(), 40);
            for (p, d) in parsed.iter().zip(&direct) {
                assert!((p - d).abs() <= 5e-6, "{p} vs {d}");
            }
            assert!(evaluate_rmse(&parsed, &direct, 1.0).unwrap() < 1e-3);
        }
    }

    #[test]
    fn inverse_prompt_recovers_k1() {
        let oracle = LocalOracle::default();
        let series = oracle.model.series(0.015, &oracle.spec).unwrap();
        let rec = format_inverse_record(&series, 0.015, &oracle.spec).unwrap();
        let answer = oracle
            .respond(&rec.render(&inverse_system_prompt(&oracle.spec), false))
            .unwrap();
        let k1: f64 = answer.parse().unwrap();
        assert!((k1 - 0.015).abs() < 1e-4, "{k1}");
    }

    #[test]
    fn unparseable_prompt_names_missing_field() {
        let err = LocalOracle::default()
            .respond("### Instruction: find it\n### Input: none\n### Response:")
            .unwrap_err();
        assert_eq!(err, LlmError::MissingField("diffusion_parameter".into()));
    }

    #[test]
    fn bolus_questions() {
        let oracle = LocalOracle::default();
        assert_eq!(
            oracle
                .respond(&format_bolus_prompt(45.0, 5.0, 2.0))
                .unwrap(),
            "You should take 7 U bolus"
        );
        assert_eq!(
            oracle.respond(&format_bolus_prompt(7.0, 5.0, 3.0)).unwrap(),
            "You should take 0 U bolus"
        );
        assert_eq!(
            oracle
                .respond(&format_bolus_prompt(30.0, 12.5, 0.5))
                .unwrap(),
            "You should take 2 U bolus"
        );
    }
}
