//! Counter-based seed derivation.
//!
//! A run owns one root seed. Every consumer of randomness (module, seed
//! index, cycle, purpose) derives its own ChaCha stream by hashing the path
//! of labels below the root, so streams never overlap and do not depend on
//! the order in which parallel workers start.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash an arbitrary label into a 64-bit word (FNV-1a, then mixed).
pub fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

/// A node in the seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedPath(u64);

impl SeedPath {
    pub fn root(seed: u64) -> Self {
        SeedPath(splitmix64(seed ^ 0x5EED_0000_0000_0000))
    }

    /// Child keyed by an integer counter (seed index, cycle, trial...).
    pub fn index(self, i: u64) -> Self {
        SeedPath(splitmix64(self.0 ^ splitmix64(i.wrapping_add(0x1234_5678))))
    }

    /// Child keyed by a purpose label ("noise", "init", ...).
    pub fn label(self, name: &str) -> Self {
        SeedPath(splitmix64(self.0.rotate_left(17) ^ label_hash(name)))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> SimRng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

/// Shorthand for an rng seeded directly from an integer.
pub fn rng_from_seed(seed: u64) -> SimRng {
    SeedPath::root(seed).rng()
}
