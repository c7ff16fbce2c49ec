//! Coefficient recovery: an LTC encoder reads an IOB trace and a sigmoid
//! head maps its final state into the physiological ranges; an RK4 decoder
//! re-simulates the trace, and training minimizes the reconstruction RMSE.

mod dataset;
mod decoder;
mod ltc;
mod network;
mod train;

use thiserror::Error;

pub use dataset::{CoefficientSampler, DatasetSpec, TraceDataset, TraceRecord};
pub use decoder::{decode, decode_protocol, decode_with_tangents, Dual3, TraceProtocol};
pub use ltc::{ltc_cell_step, LtcCellParams};
pub use network::{
    loss, resample_linear, Checkpoint, EstimatorNetwork, EstimatorParams, CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
};
pub use train::{
    batch_gradient, initial_network, smooth, train, train_with, Optimizer, TrainingConfig,
    TrainingOutcome,
};

use crate::dynamics::DynamicsError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("trace has {0} samples; at least 2 are needed")]
    TraceTooShort(usize),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("trace sampled every {trace} min but the network expects {expected} min (enable resampling)")]
    SamplingMismatch { trace: f64, expected: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}
