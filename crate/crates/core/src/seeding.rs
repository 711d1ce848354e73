//! Splittable seed derivation.
//!
//! Every random stream in a run is keyed by `(master seed, agent, component, counter)`,
//! so adding agents or epochs never shifts another stream's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random streams owned by one agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    EnvSampling = 1,
    Init = 2,
    Rollout = 3,
    Update = 4,
    Evaluation = 5,
    SharedInit = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a path of integers into a seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream_seed(master: u64, agent: usize, stream: Stream, counter: u64) -> u64 {
    derive_seed(master, &[agent as u64, stream as u64, counter])
}

pub fn stream_rng(master: u64, agent: usize, stream: Stream, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, agent, stream, counter))
}
