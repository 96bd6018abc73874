//! Counter-based random streams.
//!
//! Every stream is keyed by a tuple of integers so the values it produces do
//! not depend on the order in which threads happen to ask for them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams with equal numeric keys apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Episode = 1,
    Action = 2,
    Minibatch = 3,
    Init = 4,
    Backfill = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a list of keys into one 64-bit seed.
pub fn stream_key(stream: Stream, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(stream as u64), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream_rng(stream: Stream, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(stream, keys))
}

/// Seed of the episode stream for `(global_seed, env_index, episode_index)`.
pub fn episode_seed(global_seed: u64, env_index: usize, episode: u64) -> u64 {
    stream_key(Stream::Episode, &[global_seed, env_index as u64, episode])
}
