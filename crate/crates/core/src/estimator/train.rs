use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{CoefficientSampler, DatasetSpec, TraceDataset};
use super::decoder::TraceProtocol;
use super::network::{EstimatorNetwork, EstimatorParams};
use super::EstimatorError;
use crate::dynamics::CoefficientRanges;
use crate::provenance::config_hash;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    /// Scaled steps from a running mean of squared gradients, no momentum.
    RmsProp {
        decay: f64,
        eps: f64,
    },
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine decay of the learning rate down to this fraction by the last epoch.
    pub final_lr_fraction: f64,
    pub seed: u64,
    pub trace_count: usize,
    pub hidden: usize,
    pub protocol: TraceProtocol,
    pub sampler: CoefficientSampler,
    pub ranges: CoefficientRanges,
    pub noise_std: f64,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub unfolds: usize,
    /// Initial time constants are log-spaced over this range (min).
    pub tau_init: (f64, f64),
    /// Coefficients pinned at known values, `(k1, n, p1)`.
    pub frozen: [Option<f64>; 3],
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            learning_rate: 3e-3,
            final_lr_fraction: 0.05,
            seed: 1,
            trace_count: 2000,
            hidden: 32,
            protocol: TraceProtocol::default(),
            sampler: CoefficientSampler::default(),
            ranges: CoefficientRanges::default(),
            noise_std: 0.001,
            optimizer: Optimizer::RmsProp {
                decay: 0.9,
                eps: 1e-8,
            },
            clip_norm: 1.0,
            unfolds: 1,
            tau_init: (20.0, 1000.0),
            frozen: [None; 3],
        }
    }
}

impl TrainingConfig {
    /// The published scale: 20,000 traces, 200 epochs, batches of 32.
    pub fn paper_scale() -> Self {
        Self {
            epochs: 200,
            trace_count: 20_000,
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 || self.unfolds == 0 {
            return Err(EstimatorError::InvalidConfig(
                "epochs, batch_size, hidden and unfolds must be >= 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(EstimatorError::InvalidConfig(format!(
                "learning rate must be > 0 (got {})",
                self.learning_rate
            )));
        }
        if !(self.clip_norm > 0.0) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(EstimatorError::InvalidConfig(
                "clip_norm must be > 0 and final_lr_fraction in [0, 1]".into(),
            ));
        }
        if !(self.tau_init.0 > 0.0 && self.tau_init.0 <= self.tau_init.1) {
            return Err(EstimatorError::InvalidConfig(
                "tau_init must be positive and ordered".into(),
            ));
        }
        self.protocol.validate()
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    /// Training set described by this config.
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            count: self.trace_count,
            seed: self.seed,
            sampler: self.sampler,
            protocol: self.protocol,
            noise_std: self.noise_std,
        }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.learning_rate;
        }
        let progress = epoch as f64 / (self.epochs - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingOutcome {
    pub network: EstimatorNetwork,
    /// Mean training RMSE per epoch.
    pub loss_history: Vec<f64>,
    pub config_hash: String,
}

/// Mean loss and gradient over a batch. Per-trace gradients are computed in
/// parallel and summed in index order.
pub fn batch_gradient(
    net: &EstimatorNetwork,
    batch: &[&[f64]],
) -> Result<(f64, EstimatorParams), EstimatorError> {
    let parts: Vec<(f64, EstimatorParams)> = batch
        .par_iter()
        .map(|obs| net.loss_and_grad(obs))
        .collect::<Result<_, _>>()?;
    let mut total = EstimatorParams::zeros(net.hidden());
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_scaled(g, 1.0);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

pub fn initial_network(config: &TrainingConfig) -> EstimatorNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = EstimatorParams::init(
        config.hidden,
        config.tau_init.0,
        config.tau_init.1,
        &mut rng,
    );
    let mut net = EstimatorNetwork::new(params, config.ranges, config.protocol);
    net.unfolds = config.unfolds;
    net.frozen = config.frozen;
    net
}

/// Minimize reconstruction RMSE over `dataset`. Bit-reproducible for a fixed
/// seed, config and dataset regardless of the worker count.
pub fn train(
    config: &TrainingConfig,
    dataset: &TraceDataset,
) -> Result<TrainingOutcome, EstimatorError> {
    train_with(config, dataset, |_, _| {})
}

/// As [`train`], calling `on_epoch(epoch, loss)` after each epoch.
pub fn train_with(
    config: &TrainingConfig,
    dataset: &TraceDataset,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainingOutcome, EstimatorError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(EstimatorError::InvalidConfig("empty dataset".into()));
    }
    if dataset.spec.protocol != config.protocol {
        return Err(EstimatorError::InvalidConfig(
            "dataset trace protocol differs from the training protocol".into(),
        ));
    }
    let mut net = initial_network(config);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut second_moment = EstimatorParams::zeros(config.hidden);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let lr = config.lr_at(epoch);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&[f64]> = chunk
                .iter()
                .map(|&i| dataset.traces[i].iob.as_slice())
                .collect();
            let (loss, mut grad) = batch_gradient(&net, &batch)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(EstimatorError::Divergence { epoch, batch: b });
            }
            let norm = grad.norm();
            if norm > config.clip_norm {
                grad.scale(config.clip_norm / norm);
            }
            apply_update(
                &mut net.params,
                &grad,
                &mut second_moment,
                config.optimizer,
                lr,
            );
            if !net.params.is_finite() {
                return Err(EstimatorError::Divergence { epoch, batch: b });
            }
            epoch_loss += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let mean = epoch_loss / seen as f64;
        history.push(mean);
        log::debug!("epoch {epoch}: rmse {mean:.6e} lr {lr:.2e}");
        on_epoch(epoch, mean);
    }
    Ok(TrainingOutcome {
        network: net,
        loss_history: history,
        config_hash: config.hash(),
    })
}

fn apply_update(
    params: &mut EstimatorParams,
    grad: &EstimatorParams,
    v: &mut EstimatorParams,
    opt: Optimizer,
    lr: f64,
) {
    for ((p, g), m) in params
        .blocks_mut()
        .into_iter()
        .zip(grad.blocks())
        .zip(v.blocks_mut())
    {
        for ((pi, gi), mi) in p.iter_mut().zip(g).zip(m.iter_mut()) {
            match opt {
                Optimizer::RmsProp { decay, eps } => {
                    *mi = decay * *mi + (1.0 - decay) * gi * gi;
                    *pi -= lr * gi / (mi.sqrt() + eps);
                }
                Optimizer::Sgd => *pi -= lr * gi,
            }
        }
    }
}

/// Moving average with a trailing window.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
