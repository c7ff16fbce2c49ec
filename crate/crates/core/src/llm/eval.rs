use serde::{Deserialize, Serialize};

use super::prompt::{draw_k1, format_forward_prompt, PromptDatasetSpec};
use super::{evaluate_rmse, parse_series_response, LlmError, Responder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub k1: f64,
    /// Percent of the initial IOB; absent when the answer could not be scored.
    pub rmse: Option<f64>,
    /// Number of values parsed from the answer.
    pub returned: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub responder: String,
    pub count: usize,
    pub scored: usize,
    pub mean_rmse: Option<f64>,
    pub std_rmse: Option<f64>,
    pub max_rmse: Option<f64>,
    pub records: Vec<EvalRecord>,
}

/// Ask `responder` the forward question for each of the spec's seeded
/// coefficients and score the answers against direct simulation. Request
/// and parse failures are recorded per record; only configuration errors abort.
pub fn evaluate_forward(
    responder: &dyn Responder,
    spec: &PromptDatasetSpec,
) -> Result<EvalReport, LlmError> {
    if spec.count == 0 {
        return Err(LlmError::InvalidConfig("nothing to evaluate".into()));
    }
    spec.series.validate()?;
    let mut records = Vec::with_capacity(spec.count);
    for k1 in draw_k1(spec) {
        let reference = spec.model.series(k1, &spec.series)?;
        let scored = responder
            .respond(&format_forward_prompt(k1, &spec.series))
            .and_then(|answer| parse_series_response(&answer))
            .and_then(|values| {
                let rmse = evaluate_rmse(&values, &reference, spec.series.initial_iob)?;
                Ok((values.len(), rmse))
            });
        records.push(match scored {
            Ok((returned, rmse)) => EvalRecord {
                k1,
                rmse: Some(rmse),
                returned,
                error: None,
            },
            Err(e) => {
                log::warn!("k1 = {k1}: {e}");
                EvalRecord {
                    k1,
                    rmse: None,
                    returned: 0,
                    error: Some(e.to_string()),
                }
            }
        });
    }
    let values: Vec<f64> = records.iter().filter_map(|r| r.rmse).collect();
    let n = values.len() as f64;
    let mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / n);
    let std = mean.map(|m| (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt());
    Ok(EvalReport {
        responder: responder.name(),
        count: records.len(),
        scored: values.len(),
        mean_rmse: mean,
        std_rmse: std,
        max_rmse: values.iter().copied().reduce(f64::max),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{FnResponder, LocalOracle};

    #[test]
    fn oracle_scores_near_zero() {
        let spec = PromptDatasetSpec {
            count: 25,
            seed: 4,
            ..Default::default()
        };
        let report = evaluate_forward(&LocalOracle::default(), &spec).unwrap();
        assert_eq!((report.count, report.scored), (25, 25));
        assert!(report.max_rmse.unwrap() < 1e-3);
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        let flat = FnResponder {
            name: "flat".into(),
            f: |p: &str| {
                if p.contains("= 0.0") {
                    Err(LlmError::Transport("down".into()))
                } else {
                    Ok("Your timeseries is 1.0, 1.0, 1.0".to_string())
                }
            },
        };
        let spec = PromptDatasetSpec {
            count: 4,
            ..Default::default()
        };
        let report = evaluate_forward(&flat, &spec).unwrap();
        assert_eq!(report.count, 4);
        assert_eq!(
            report.scored + report.records.iter().filter(|r| r.error.is_some()).count(),
            4
        );
        assert!(report
            .records
            .iter()
            .filter_map(|r| r.rmse)
            .all(|v| v > 0.0));
    }
}
