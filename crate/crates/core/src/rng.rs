//! Replayable random streams.
//!
//! Every stochastic operation takes an explicit generator. Streams are ChaCha8
//! generators whose key comes from the run seed and whose stream id is derived
//! from a tuple such as `(purpose, epoch, sample index)`, so the draws for a
//! given sample do not depend on iteration order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream purposes. Distinct values keep independent uses from sharing draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Dropout = 4,
    Split = 5,
    Synthetic = 6,
    Bench = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for `seed`, keyed by `purpose` and up to any number of indices.
pub fn stream(seed: u64, purpose: Purpose, keys: &[u64]) -> StreamRng {
    let mut id = splitmix(purpose as u64);
    for &k in keys {
        id = splitmix(id ^ splitmix(k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
