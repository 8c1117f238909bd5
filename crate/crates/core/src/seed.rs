//! Stable seed derivation.
//!
//! Every random stream in the crate is keyed by a base seed plus a path of
//! labels (component name, bag id, repeat index). The derivation is a fixed
//! FNV-1a hash followed by a splitmix64 finalizer, so it does not depend on
//! the standard library's randomized hasher or on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// One component of a seed path.
#[derive(Debug, Clone, Copy)]
pub enum Part<'a> {
    Str(&'a str),
    Int(u64),
}

impl<'a> From<&'a str> for Part<'a> {
    fn from(s: &'a str) -> Self {
        Part::Str(s)
    }
}

impl From<u64> for Part<'_> {
    fn from(v: u64) -> Self {
        Part::Int(v)
    }
}

impl From<usize> for Part<'_> {
    fn from(v: usize) -> Self {
        Part::Int(v as u64)
    }
}

fn fnv(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `base` and a label path.
pub fn derive(base: u64, parts: &[Part<'_>]) -> u64 {
    let mut h = fnv(FNV_OFFSET, &base.to_le_bytes());
    for part in parts {
        match part {
            Part::Str(s) => {
                h = fnv(h, &[0x01]);
                h = fnv(h, &(s.len() as u64).to_le_bytes());
                h = fnv(h, s.as_bytes());
            }
            Part::Int(v) => {
                h = fnv(h, &[0x02]);
                h = fnv(h, &v.to_le_bytes());
            }
        }
    }
    splitmix64(h)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shorthand for `rng(derive(base, parts))`.
pub fn rng_for(base: u64, parts: &[Part<'_>]) -> ChaCha8Rng {
    rng(derive(base, parts))
}
