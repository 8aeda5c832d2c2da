//! Small deterministic hashing helpers.
//!
//! `std::hash` offers no stability promises across releases, so everything
//! that must reproduce bit-for-bit (parameter init streams, toy text
//! embeddings, visualization colors) goes through these fixed functions.

/// FNV-1a over the bytes of `s`.
pub fn fnv1a64(s: &str) -> u64 {
    fnv1a64_bytes(s.as_bytes())
}

/// FNV-1a over raw bytes (for hashing tensor contents).
pub fn fnv1a64_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// One SplitMix64 step; good enough to decorrelate derived seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Stable per-name seed derivation: mixes a base seed with a name hash.
pub fn derive_seed(base: u64, name: &str) -> u64 {
    splitmix64(base ^ fnv1a64(name))
}
