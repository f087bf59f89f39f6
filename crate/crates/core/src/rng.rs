//! Seeded substream derivation.
//!
//! Every random draw in the simulator comes from a ChaCha8 stream whose seed
//! is derived from the master seed and a key path such as
//! `(stage, module, group, trial)`. The derivation folds each key into a
//! 64-bit state with the SplitMix64 finalizer:
//!
//! ```text
//! h0 = splitmix(master ^ 0x6a09e667f3bcc909)
//! h_{i+1} = splitmix(h_i ^ splitmix(key_i + 0x9e3779b97f4a7c15 * (i + 1)))
//! seed = h_n
//! ```
//!
//! Because a stream depends only on its key path, work fanned out over
//! threads draws exactly the same numbers as a serial loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type SimRng = ChaCha8Rng;

/// Pipeline stage tags used as the first key of a substream path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stage {
    BuildCells = 1,
    BuildMismatch = 2,
    Pattern = 3,
    Characterize = 4,
    Tune = 5,
    Extract = 6,
    Map = 7,
    Inject = 8,
    Forward = 9,
    Missions = 10,
    Train = 11,
    Dataset = 12,
    Eval = 13,
    Drift = 14,
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the 64-bit seed for a key path.
pub fn derive_seed(master: u64, keys: &[u64]) -> u64 {
    let mut h = splitmix(master ^ 0x6a09_e667_f3bc_c909);
    for (i, &k) in keys.iter().enumerate() {
        let salted = k.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1));
        h = splitmix(h ^ splitmix(salted));
    }
    h
}

/// Root of a tree of reproducible random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Streams {
    pub master: u64,
}

impl Streams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    /// A stream for `stage` keyed by `keys`.
    pub fn stream(&self, stage: Stage, keys: &[u64]) -> SimRng {
        let mut path = Vec::with_capacity(keys.len() + 1);
        path.push(stage as u64);
        path.extend_from_slice(keys);
        SimRng::seed_from_u64(derive_seed(self.master, &path))
    }

    /// A child root whose streams are disjoint from the parent's.
    pub fn child(&self, stage: Stage, keys: &[u64]) -> Streams {
        let mut path = vec![stage as u64, u64::MAX];
        path.extend_from_slice(keys);
        Streams::new(derive_seed(self.master, &path))
    }
}
