//! Activation memory accounting.
//!
//! The estimator counts every tensor the training forward pass stores
//! (store-all policy) and doubles it for the gradient of each. Weights and
//! optimizer moments are excluded; they do not scale with the grid.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::model::config::{ModelConfig, COND_CHANNELS};
use crate::model::ops::voxel_count;

/// Every stored activation has a gradient of the same size.
pub const STORAGE_MULTIPLIER: u64 = 2;

/// Output-grid tensors per head channel: logits and sigmoid probabilities.
pub const HEAD_TENSORS_PER_CHANNEL: u64 = 2;

/// Scalars stored by one forward pass for a single sample.
pub fn activation_scalars(config: &ModelConfig) -> u64 {
    let levels = config.num_levels;
    let n = |l: usize| voxel_count(config.level_dims(l)) as u64;
    let c = |l: usize| config.channels(l) as u64;
    let cond = if config.head.is_lcs() {
        COND_CHANNELS as u64
    } else {
        0
    };

    let mut total = n(0); // input image
    for l in 0..levels - 1 {
        total += c(l) * n(l); // encoder output
        total += c(l) * n(l + 1); // pooled
    }
    let b = levels - 1;
    total += cond * n(b); // conditioning tensor
    total += (c(b - 1) + cond) * n(b); // bottleneck input
    total += c(b) * n(b); // bottleneck output
    for l in 0..levels - 1 {
        total += c(l) * n(l); // up-convolution
        total += 2 * c(l) * n(l); // skip concatenation
        total += c(l) * n(l); // decoder output
    }
    total += HEAD_TENSORS_PER_CHANNEL * config.output_channels() as u64 * n(0);
    total
}

/// Bytes of activations plus their gradients for one sample in a
/// forward+backward pass.
pub fn estimate_activation_memory(config: &ModelConfig, bytes_per_scalar: usize) -> u64 {
    STORAGE_MULTIPLIER * activation_scalars(config) * bytes_per_scalar as u64
}

/// Tracks live and peak activation bytes reported by inference passes.
/// Shared between workers; counts are the sum over all concurrent passes.
#[derive(Debug, Default)]
pub struct ActivationMeter {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl ActivationMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&self, bytes: usize) {
        let now = self.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    pub fn free(&self, bytes: usize) {
        self.current.fetch_sub(bytes, Ordering::SeqCst);
    }

    pub fn current(&self) -> usize {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}
