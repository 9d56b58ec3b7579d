//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator keyed by a 64-bit
//! seed. Child seeds are derived from a parent seed and a list of string or
//! integer tags by FNV-1a hashing the tags and folding them through the
//! SplitMix64 finalizer, so adding a new stream (say, trial 21) never moves
//! the seeds handed to existing streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A tag used to name a derived stream.
#[derive(Debug, Clone, Copy)]
pub enum Tag<'a> {
    Str(&'a str),
    Int(u64),
}

impl<'a> From<&'a str> for Tag<'a> {
    fn from(s: &'a str) -> Self {
        Tag::Str(s)
    }
}

impl From<u64> for Tag<'_> {
    fn from(v: u64) -> Self {
        Tag::Int(v)
    }
}

impl From<usize> for Tag<'_> {
    fn from(v: usize) -> Self {
        Tag::Int(v as u64)
    }
}

/// Derives a child seed from `parent` and an ordered list of tags.
pub fn derive(parent: u64, tags: &[Tag<'_>]) -> u64 {
    let mut s = mix64(parent);
    for tag in tags {
        let h = match tag {
            Tag::Str(t) => fnv1a(t.as_bytes()),
            Tag::Int(v) => mix64(*v ^ 0xA5A5_A5A5_5A5A_5A5A),
        };
        s = mix64(s ^ h);
    }
    s
}
