//! Seed derivation for independent RNG streams.
//!
//! Every random consumer (data generation, init, per-epoch shuffles, dropout)
//! draws from its own stream derived from a base seed and a purpose tag, so
//! changing how one consumer draws never perturbs the others.

/// SplitMix64 finalizer; the standard 64-bit mixer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF29CE484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001B3);
    }
    h
}

/// Stream seed for `(base, tag)`.
pub fn derive(base: u64, tag: &str) -> u64 {
    splitmix64(base ^ fnv1a64(tag.as_bytes()))
}

/// Stream seed for `(base, tag, index)`, e.g. per-epoch shuffles.
pub fn derive_indexed(base: u64, tag: &str, index: u64) -> u64 {
    splitmix64(derive(base, tag) ^ splitmix64(index))
}
