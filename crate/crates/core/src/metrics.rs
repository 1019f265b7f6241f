//! Evaluation metrics and communication / compute cost estimates.

use alloc::collections::BTreeSet;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::DenseModel;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoundMetrics {
    pub round: usize,
    /// Heavy model accuracy on the held-out test set.
    pub global_acc: f64,
    /// Heavy model accuracy on the public set.
    pub server_val_acc: f64,
    /// Targeted attack success rate toward the configured class.
    pub asr: f64,
    /// `1 - global_acc`, reported separately for untargeted poisoning.
    pub untargeted_asr: f64,
    pub pfpv: f64,
    /// PFPV of the accuracy-based legacy validator, when enabled.
    pub legacy_pfpv: Option<f64>,
    pub comm_bytes_per_client: u64,
    pub flags: BTreeSet<usize>,
}

/// Probability of false positive validation: `|H ∩ F| / |H|`.
pub fn pfpv(honest: &BTreeSet<usize>, flagged: &BTreeSet<usize>) -> Result<f64> {
    if honest.is_empty() {
        return Err(Error::invalid("honest set is empty"));
    }
    Ok(honest.intersection(flagged).count() as f64 / honest.len() as f64)
}

/// Fraction of samples with true label other than `target` that the model
/// classifies as `target`.
pub fn asr(model: &DenseModel, testset: &Dataset, target: usize) -> Result<f64> {
    let predictions = model.predict(testset.features())?;
    let (hits, total) = predictions
        .iter()
        .zip(testset.labels())
        .filter(|(_, &y)| y != target)
        .fold((0usize, 0usize), |(h, t), (&p, _)| {
            (h + usize::from(p == target), t + 1)
        });
    if total == 0 {
        return Err(Error::invalid("every test sample belongs to the target class"));
    }
    Ok(hits as f64 / total as f64)
}

/// Plain clean-test accuracy, measured at the end of an attacked run.
pub fn robust_accuracy(model: &DenseModel, clean_testset: &Dataset) -> Result<f64> {
    model.accuracy(clean_testset)
}

pub fn accuracy_gap(server_val_acc: f64, global_test_acc: f64) -> f64 {
    (server_val_acc - global_test_acc).abs()
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostModel {
    pub bytes_per_value: u64,
    /// Parameters of the model a gradient-sharing baseline would ship.
    pub param_count: u64,
    pub n_public: u64,
    pub num_classes: u64,
    pub penultimate_d: u64,
    /// Device throughput in operations per second.
    pub device_flops: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            bytes_per_value: 4,
            param_count: 0,
            n_public: 500,
            num_classes: 10,
            penultimate_d: 32,
            device_flops: 0.3e9,
        }
    }
}

impl CostModel {
    /// Bytes one client sends in one direction: logits, plus the `C × d`
    /// gradient block when shared.
    pub fn payload_bytes(&self, include_grad: bool) -> u64 {
        let logits = self.n_public * self.num_classes * self.bytes_per_value;
        let grad = if include_grad {
            self.num_classes * self.penultimate_d * self.bytes_per_value
        } else {
            0
        };
        logits + grad
    }

    /// Bytes per round for a client shipping every parameter as a gradient.
    pub fn full_gradient_bytes(&self) -> u64 {
        self.param_count * self.bytes_per_value
    }
}

/// Bytes per client per round, up and down.
pub fn comm_cost(cost: &CostModel, include_grad: bool) -> u64 {
    2 * cost.payload_bytes(include_grad)
}

/// Seconds to train: `3 · flops_per_sample · n_samples · epochs / device_flops`
/// (one forward pass plus a backward pass at twice its cost).
pub fn train_time_estimate(flops_per_sample: f64, n_samples: f64, epochs: f64, device_flops: f64) -> Result<f64> {
    if !(device_flops > 0.0) || flops_per_sample < 0.0 || n_samples < 0.0 || epochs < 0.0 {
        return Err(Error::invalid("cost inputs must be non-negative with positive throughput"));
    }
    Ok(3.0 * flops_per_sample * n_samples * epochs / device_flops)
}
