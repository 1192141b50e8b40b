//! Named random sub-streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent randomness consumers of a single run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Dataset = 1,
    Partition = 2,
    Init = 3,
    Batch = 4,
    Delays = 5,
    Probe = 6,
}

/// Generator for `stream` under `seed`; streams never overlap.
pub fn stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Generator for a sub-stream further keyed by an index (e.g. worker, iteration).
pub fn substream(seed: u64, stream: Stream, key: u64) -> ChaCha8Rng {
    let mixed = splitmix64(seed ^ splitmix64(key.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(stream as u64);
    rng
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
