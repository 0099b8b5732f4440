//! Seeded randomness.
//!
//! Every stochastic quantity in the pipeline is drawn from an explicitly
//! seeded ChaCha stream so that runs are bitwise reproducible. Independent
//! sub-streams (data workers, chain initializations, augmentation) are
//! derived from the run seed with a splitmix hash rather than by sharing
//! one sequential stream.

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

pub type StreamRng = ChaCha8Rng;

/// Root stream for a run seed.
pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sub-seed for an independent stream of the given run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

/// Independent stream `stream` of the run with the given seed.
pub fn substream(seed: u64, stream: u64) -> StreamRng {
    seeded(derive_seed(seed, stream))
}

/// `n` draws from the standard normal distribution.
pub fn normal_vec(rng: &mut StreamRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Standard-normal tensor of the given shape, drawn from `rng`.
pub fn randn_tensor(rng: &mut StreamRng, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = normal_vec(rng, n);
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
}

/// Uniform draw from {1, ..., t_max}.
pub fn uniform_timestep(rng: &mut StreamRng, t_max: usize) -> usize {
    rng.random_range(1..=t_max)
}
