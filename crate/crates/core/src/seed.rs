//! Derived random streams.
//!
//! Every unit of parallel work (a task's rollouts, a method's evaluation)
//! gets its own ChaCha stream keyed by the master seed and a stable label, so
//! results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with a label into a new 64-bit seed.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(master ^ splitmix64(h))
}

pub fn rng_from_seed(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

/// A stream for `label` under `master`.
pub fn stream(master: u64, label: &str) -> StreamRng {
    rng_from_seed(derive_seed(master, label))
}
