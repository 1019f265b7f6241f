//! Seed derivation. Every random draw in a run comes from a ChaCha8 stream
//! keyed by `(master_seed, stream, client, round)`, so results do not depend
//! on scheduling or on how many draws another stream made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Named sub-streams so unrelated draws never share a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Dataset = 1,
    Split = 2,
    Partition = 3,
    Init = 4,
    LocalTrain = 5,
    LabelFlip = 6,
    Attack = 7,
    ServerTrain = 8,
    Participation = 9,
    Drift = 10,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable hash of `(master, stream, client, round)`.
pub fn derive_seed(master: u64, stream: Stream, client: u64, round: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ stream as u64);
    h = splitmix64(h ^ client);
    splitmix64(h ^ round)
}

pub fn rng_from(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(master: u64, stream: Stream, client: u64, round: u64) -> SimRng {
    rng_from(derive_seed(master, stream, client, round))
}
