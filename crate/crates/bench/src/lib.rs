//! Shared fixtures for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pvnet_core::model::{ModelConfig, ModelParams};
use pvnet_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The configuration used by the reference training run.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        num_classes: 4,
        latent_dim: 64,
        base_width: 8,
    }
}

pub fn params(cfg: ModelConfig) -> ModelParams<f32> {
    ModelParams::init(cfg, &mut rng(0)).expect("valid config")
}

pub fn volume(batch: usize, channels: usize, size: usize) -> Tensor<f32> {
    Tensor::uniform(&[batch, channels, size, size, size], 0.0, 1.0, &mut rng(1))
        .expect("non-empty shape")
}

/// Banded labels over `classes` classes.
pub fn labels(batch: usize, size: usize, classes: usize) -> Vec<u8> {
    (0..batch * size * size * size)
        .map(|i| ((i / (size * size)) % classes) as u8)
        .collect()
}
