//! Keyed random streams.
//!
//! Every stochastic unit of work (an episode, a rollout, a pool attempt) owns
//! a generator derived from the run seed plus a path of indices, so results do
//! not depend on which worker picks the work up or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tags keep streams for different purposes disjoint under the same seed.
pub mod domain {
    pub const INIT_STATE: u64 = 0x01;
    pub const ORACLE: u64 = 0x02;
    pub const EDP_ORDER: u64 = 0x03;
    pub const EDP_TOOLS: u64 = 0x04;
    pub const SFT: u64 = 0x05;
    pub const TRAIN_STATE: u64 = 0x06;
    pub const TRAIN_ROLLOUT: u64 = 0x07;
    pub const EVAL_STATE: u64 = 0x08;
    pub const EVAL_ROLLOUT: u64 = 0x09;
    pub const POOL_FAULT: u64 = 0x0a;
    pub const POOL_LATENCY: u64 = 0x0b;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed and a key path into a single 64-bit stream id.
pub fn mix(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(seed: u64, keys: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(mix(seed, keys))
}
