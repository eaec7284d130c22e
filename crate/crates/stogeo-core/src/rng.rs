//! Counter-based random number generation.
//!
//! Every draw is a pure function of `(seed, stream, path, step, slot)`, so
//! path simulations are reproducible bit-for-bit regardless of thread count
//! and paths can be generated in any order.

use std::f64::consts::TAU;

/// SplitMix64 finalizer; a full-avalanche 64-bit mixer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Independent stream tags keep different consumers of the same seed apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    PathNoise,
    InitialCondition,
    Generic(u64),
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::PathNoise => 0x01,
            Stream::InitialCondition => 0x02,
            Stream::Generic(k) => 0x100 + k,
        }
    }
}

#[inline]
fn key(seed: u64, stream: Stream, path: u64, step: u64, slot: u64) -> u64 {
    let mut k = mix(seed ^ 0x5851f42d4c957f2d);
    k = mix(k ^ stream.tag());
    k = mix(k ^ path);
    k = mix(k ^ step);
    mix(k ^ slot)
}

#[inline]
fn to_unit(x: u64) -> f64 {
    // (0, 1]: never zero, so the log below is finite.
    ((x >> 11) as f64 + 1.0) * (1.0 / 9007199254740992.0)
}

/// Standard normal draw addressed by counters (Box-Muller, cosine branch).
#[inline]
pub fn normal(seed: u64, stream: Stream, path: u64, step: u64, slot: u64) -> f64 {
    let k = key(seed, stream, path, step, slot);
    let u1 = to_unit(mix(k ^ 0xa0761d6478bd642f));
    let u2 = to_unit(mix(k ^ 0xe7037ed1a0b428db));
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Uniform draw on [0, 1) addressed by counters.
#[inline]
pub fn uniform(seed: u64, stream: Stream, path: u64, step: u64, slot: u64) -> f64 {
    let k = key(seed, stream, path, step, slot);
    (mix(k ^ 0x8ebc6af09c88c6e3) >> 11) as f64 * (1.0 / 9007199254740992.0)
}

/// FNV-1a hash of a byte string; used for config/spec digests.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
