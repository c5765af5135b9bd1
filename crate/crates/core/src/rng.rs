//! Seed derivation. All randomness in a run flows from one master seed;
//! independent consumers (init, sampler, augmentation, probes) get their own
//! streams so that adding draws to one never shifts another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the tag bytes, mixed into the master seed.
fn mix(master: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in tag.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer over the combination
    let mut z = master ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic RNG for the named stream of a run.
pub fn stream(master: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(master, tag))
}

/// Derived sub-seed for components that take a bare seed.
pub fn derived_seed(master: u64, tag: &str) -> u64 {
    mix(master, tag)
}

/// Indexed stream: one RNG per (tag, index) pair, independent of how much
/// any other stream consumed. Trainers use this per step and per batch role
/// so that two trainers sharing a role draw identical views.
pub fn stream_indexed(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let base = mix(master, tag);
    ChaCha8Rng::seed_from_u64(mix(base ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15), tag))
}

/// Deterministic RNG from a bare seed (directions, dataset generators).
pub fn from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
