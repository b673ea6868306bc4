//! Seeded random streams.
//!
//! Every stochastic draw in the lab comes from a `ChaCha8Rng` whose seed is
//! derived from the global seed plus a path of integers (iteration, prompt,
//! sample, purpose). Two runs that share the global seed therefore replay
//! identically, and independent purposes never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Purpose tags keep streams for different consumers disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Pretrain = 2,
    Prompts = 3,
    Rollout = 4,
    Enhancer = 5,
    Eval = 6,
    Drift = 7,
    Control = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a path of integers into a single 64-bit seed.
pub fn derive_seed(global: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(global), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(global: u64, purpose: Purpose, path: &[u64]) -> Stream {
    let mut full = Vec::with_capacity(path.len() + 1);
    full.push(purpose as u64);
    full.extend_from_slice(path);
    ChaCha8Rng::seed_from_u64(derive_seed(global, &full))
}
