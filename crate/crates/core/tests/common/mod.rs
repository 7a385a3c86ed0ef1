#![allow(dead_code)]

use glassfuse::segnet::seeded_rng;
use glassfuse::{FusionMode, Mask, NetworkConfig, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    seeded_rng(seed, 99)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

pub fn random_mask(h: usize, w: usize, p: f64, rng: &mut ChaCha8Rng) -> Mask {
    Mask::from_fn(h, w, |_, _| rng.random_bool(p))
}

/// Network small enough for finite differences at 16×16.
pub fn toy_config(mode: FusionMode) -> NetworkConfig {
    NetworkConfig {
        shallow_channels: 4,
        deep_channels: 4,
        decoder_channels: 2,
        shallow_stride: 2,
        deep_stride: 4,
        ..NetworkConfig::new(16, 16, mode)
    }
}
