//! Named, independent random streams derived from one experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Purposes that get their own stream, so e.g. changing augmentation never
/// perturbs initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    AuxInit,
    Shuffle,
    Augment,
    Data,
}

impl Stream {
    fn tag(self) -> &'static str {
        match self {
            Stream::Init => "init",
            Stream::AuxInit => "aux-init",
            Stream::Shuffle => "shuffle",
            Stream::Augment => "augment",
            Stream::Data => "data",
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed for `stream` under `seed`, optionally salted (e.g. with a method id).
pub fn derive_seed(seed: u64, stream: Stream, salt: &str) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(stream.tag().as_bytes()) ^ fnv1a(salt.as_bytes())))
}

pub fn stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, ""))
}

pub fn salted_stream(seed: u64, s: Stream, salt: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, s, salt))
}

/// Exact position of a ChaCha stream, for checkpointing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string (u128 is not JSON-safe).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Option<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}
