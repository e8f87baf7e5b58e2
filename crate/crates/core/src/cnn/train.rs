//! Full-batch gradient descent with a loss-driven learning rate.

use serde::{Deserialize, Serialize};

use super::{Network, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_rate: f64,
    /// Rate multiplier after an iteration whose loss beat the previous one.
    pub grow: f64,
    /// Rate multiplier otherwise.
    pub shrink: f64,
    pub max_iterations: usize,
    /// Stop once the training error rate is at or below this fraction.
    pub target_error: f64,
    /// Stop once the L2 norm of the applied gradient drops below this.
    pub min_gradient: f64,
    /// When set and the train set has `n > reference_batch` items, gradients
    /// are scaled by `reference_batch / n`, so a given rate takes the step it
    /// would take on a batch of the reference size. `None` always steps
    /// along the raw summed gradient.
    pub reference_batch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_rate: 0.001,
            grow: 1.05,
            shrink: 0.70,
            max_iterations: 100,
            target_error: 0.01,
            min_gradient: 0.001,
            reference_batch: Some(60),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetError,
    GradientNorm,
    MaxIterations,
    EmptyBatch,
}

/// Measurements taken at the weights in effect at the start of an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    pub train_error: f64,
    /// Rate used for the step that follows this measurement.
    pub learning_rate: f64,
    /// Norm of the gradient after reference-batch scaling.
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
    pub stop: StopReason,
}

/// Trains `net` in place on the whole of `samples` each iteration.
///
/// The recorded loss is the plain sum over all samples.
/// The first record carries `initial_rate`. From the second on, the rate is
/// scaled by `grow` if the loss fell below the previous iteration's loss and
/// by `shrink` otherwise. No step is taken after a stopping test passes, so
/// the final weights are the ones described by the last record.
pub fn train(net: &mut Network, samples: &[&Sample], config: &TrainConfig) -> TrainHistory {
    let mut records = Vec::new();
    if samples.is_empty() {
        return TrainHistory {
            records,
            stop: StopReason::EmptyBatch,
        };
    }
    let scale = config
        .reference_batch
        .map_or(1.0, |r| (r as f64 / samples.len() as f64).min(1.0));
    let mut rate = config.initial_rate;
    let mut prev_loss = f64::INFINITY;
    for iteration in 0..config.max_iterations {
        let stats = net.batch_gradient(samples);
        if iteration > 0 {
            rate *= if stats.loss < prev_loss { config.grow } else { config.shrink };
        }
        prev_loss = stats.loss;
        let norm = stats.gradients.norm() * scale;
        let error = stats.error_rate();
        records.push(TrainRecord {
            iteration,
            loss: stats.loss,
            train_error: error,
            learning_rate: rate,
            gradient_norm: norm,
        });
        if error <= config.target_error {
            return TrainHistory {
                records,
                stop: StopReason::TargetError,
            };
        }
        if norm < config.min_gradient {
            return TrainHistory {
                records,
                stop: StopReason::GradientNorm,
            };
        }
        net.apply_step(&stats.gradients, rate * scale);
    }
    TrainHistory {
        records,
        stop: StopReason::MaxIterations,
    }
}
