//! Deterministic derivation of independent RNG streams from one master seed.
//!
//! Every stochastic component (noise injection, importance-sample draws,
//! minibatch shuffling, validation evaluation) gets its own stream so that
//! turning one component on or off never perturbs the draws of another.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Stream tags.  Values are arbitrary but fixed forever.
pub const STREAM_EPS: u64 = 0x01;
pub const STREAM_Z: u64 = 0x02;
pub const STREAM_SHUFFLE: u64 = 0x03;
pub const STREAM_VAL: u64 = 0x04;
pub const STREAM_EVAL: u64 = 0x05;
pub const STREAM_SVI_OPT: u64 = 0x06;
pub const STREAM_INIT: u64 = 0x07;

/// splitmix64 finalizer; decorrelates sequential tags.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Child seed for `(master, tag)`.
pub fn child_seed(master: u64, tag: u64) -> u64 {
    mix(mix(master) ^ mix(tag))
}

/// Child seed for `(master, tag, index)` — e.g. per-iteration streams.
pub fn child_seed3(master: u64, tag: u64, index: u64) -> u64 {
    mix(child_seed(master, tag) ^ mix(index.wrapping_add(0x517cc1b727220a95)))
}

pub fn rng_for(master: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(master, tag))
}

pub fn rng_for3(master: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed3(master, tag, index))
}
