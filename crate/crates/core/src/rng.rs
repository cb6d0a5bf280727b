//! Seeded random streams.
//!
//! Every stochastic step in the crate draws from a `ChaCha8Rng` keyed by a
//! user seed and a fixed stream id, so that independent consumers never share
//! a sequence and results do not depend on call order elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const STREAM_CIPHER_MAP: u64 = 1;
pub(crate) const STREAM_CIPHER_TEXT: u64 = 2;
pub(crate) const STREAM_MIX: u64 = 3;
pub(crate) const STREAM_SPLIT: u64 = 4;
pub(crate) const STREAM_INIT: u64 = 5;
pub(crate) const STREAM_TPP: u64 = 6;
pub(crate) const STREAM_MLM: u64 = 7;
pub(crate) const STREAM_FINETUNE: u64 = 8;
pub(crate) const STREAM_HEAD: u64 = 9;
pub(crate) const STREAM_TAGS: u64 = 10;

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer; used to derive per-step seeds from a base seed.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
