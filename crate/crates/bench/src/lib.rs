//! Benchmark fixtures shared by the criterion targets.

use midgan_core::networks::NetworkConfig;
use midgan_core::trainer::TrainConfig;
use midgan_core::Tensor;

/// Deterministic pseudo-random tensor with values in `[-1, 1)`.
pub fn filled(shape: &[usize], seed: u64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 40) as f32 / (1u64 << 23) as f32) - 1.0
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Training config used by the step benchmark: default network at the given batch size.
pub fn step_config(batch_size: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(1);
    cfg.batch_size = batch_size;
    cfg.network = NetworkConfig::default();
    cfg
}
