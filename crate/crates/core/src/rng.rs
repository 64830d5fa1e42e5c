//! Seeded, portable random streams.
//!
//! Everything random in the crate draws from ChaCha8 keyed by a 64-bit seed
//! plus a stream id, so independent consumers (data, init, sampling) never
//! share a sequence and results reproduce across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ndnum::Tensor;

/// Name reported in configs and file summaries.
pub const GENERATOR_NAME: &str = "ChaCha8";

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}
