//! Embodied prompts for the insulin model, a chat-completion client, an
//! offline oracle that answers the same prompts by simulation, and response
//! parsing and scoring.

mod client;
mod eval;
mod oracle;
mod parse;
mod prompt;

use thiserror::Error;

pub use client::{ChatClient, ChatEndpointConfig};
pub use eval::{evaluate_forward, EvalRecord, EvalReport};
pub use oracle::{FnResponder, LocalOracle};
pub use parse::{parse_dose_response, parse_field, parse_series_response};
pub use prompt::{
    draw_k1, format_bolus_prompt, format_forward_prompt, format_inverse_record, format_series,
    format_series_response, format_value, forward_record, generate_prompt_dataset,
    inverse_system_prompt, read_jsonl, write_jsonl, AlpacaRecord, PromptDatasetSpec, PromptKind,
    PromptModel, SeriesSpec, BOLUS_CONTEXT, DIFFUSION_FIELD, FORWARD_INSTRUCTION,
    FORWARD_SYSTEM_PROMPT, INVERSE_INSTRUCTION, INVERSE_SYSTEM_PROMPT,
};

use crate::dynamics::DynamicsError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} samples, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no numbers found in response")]
    NoNumbers,
    #[error("non-finite literal `{0}`")]
    NonFinite(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("prompt is missing field `{0}`")]
    MissingField(String),
    #[error("empty series")]
    EmptySeries,
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: usize },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response payload: {0}")]
    Malformed(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Anything that answers a prompt with text: a remote chat model or a local stand-in.
pub trait Responder: Send + Sync {
    fn name(&self) -> String;
    fn respond(&self, prompt: &str) -> Result<String, LlmError>;
}

/// RMSE between two series in percent of `initial_iob`. The longer series
/// is truncated to the shorter one.
pub fn evaluate_rmse(
    generated: &[f64],
    reference: &[f64],
    initial_iob: f64,
) -> Result<f64, LlmError> {
    let n = generated.len().min(reference.len());
    if n == 0 {
        return Err(LlmError::EmptySeries);
    }
    if !(initial_iob.is_finite() && initial_iob > 0.0) {
        return Err(LlmError::InvalidConfig("initial_iob must be > 0".into()));
    }
    let sq: f64 = generated[..n]
        .iter()
        .zip(&reference[..n])
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(100.0 * (sq / n as f64).sqrt() / initial_iob)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_definition() {
        let r = [1.0, 0.9, 0.8, 0.7];
        assert_eq!(evaluate_rmse(&r, &r, 1.0).unwrap(), 0.0);
        let shifted: Vec<f64> = r.iter().map(|v| v + 0.06).collect();
        assert!((evaluate_rmse(&shifted, &r, 1.0).unwrap() - 6.0).abs() < 1e-12);
        assert!((evaluate_rmse(&shifted[..2], &r, 1.0).unwrap() - 6.0).abs() < 1e-12);
        assert!(matches!(
            evaluate_rmse(&[], &r, 1.0),
            Err(LlmError::EmptySeries)
        ));
    }
}
