//! Named, splittable random streams.
//!
//! Every stochastic stage draws from a [`SeedStream`] derived from one master
//! seed by a path of labels and indices, e.g. `master / "rollout" / t / slot`.
//! Each leaf seeds a ChaCha8 generator, so any stage can be replayed on its own
//! and parallel evaluation over leaves is deterministic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedStream {
    key: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl SeedStream {
    pub fn new(master_seed: u64) -> Self {
        Self {
            key: splitmix64(master_seed),
        }
    }

    pub fn child(&self, label: &str) -> Self {
        Self {
            key: splitmix64(self.key ^ fnv1a(label)),
        }
    }

    pub fn index(&self, i: u64) -> Self {
        Self {
            key: splitmix64(self.key.rotate_left(17) ^ splitmix64(i)),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn rng(&self) -> StreamRng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}
