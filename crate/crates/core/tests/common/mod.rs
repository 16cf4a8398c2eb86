#![allow(dead_code)]

pub mod gradcheck;
pub mod loss_oracle;
pub mod reference;

use diffmath::{Real, Tensor};
use holomotion::policy::{InterfaceDims, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn dims() -> InterfaceDims {
    InterfaceDims {
        obs_dim: 20,
        critic_dim: 26,
        ref_offset: 8,
        ref_len: 12,
        action_dim: 3,
        contact_bodies: 4,
        pos_bodies: 4,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_obs<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::of(rng.random_range(-2.0..2.0))).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn desk() -> ModelConfig {
    ModelConfig::desk(dims())
}

pub fn tiny() -> ModelConfig {
    ModelConfig::tiny(dims())
}
