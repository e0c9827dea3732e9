//! Named random streams derived from a single master seed.
//!
//! Every consumer of randomness addresses its stream by a path of names and
//! indices (for example `seed / "labeling" / row`), so results do not depend
//! on the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in name.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// A node in the tree of derived seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedTree(u64);

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree(splitmix64(seed))
    }

    /// Child stream addressed by name.
    pub fn child(self, name: &str) -> Self {
        SeedTree(splitmix64(self.0 ^ fnv1a(name)))
    }

    /// Child stream addressed by position.
    pub fn index(self, i: u64) -> Self {
        SeedTree(splitmix64(self.0.wrapping_add(splitmix64(i ^ GOLDEN_GAMMA))))
    }

    /// Raw 64-bit seed of this node, suitable for handing to another seeded API.
    pub fn seed(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

/// Stream names used across the crate.
pub mod streams {
    pub const LABELING: &str = "labeling";
    pub const TIE_BREAK: &str = "tie-break";
    pub const RESAMPLE: &str = "resample";
    pub const SIMULATION: &str = "simulation";
    pub const SPLIT: &str = "split";
    pub const CV_FOLDS: &str = "cv-folds";
    pub const MONTE_CARLO: &str = "monte-carlo";
}
