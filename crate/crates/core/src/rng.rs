//! Portable seeded randomness.
//!
//! Everything that must reproduce bit-for-bit across runs and platforms goes
//! through PCG32 (`Lcg64Xsh32`, 64-bit LCG state with XSH-RR output) and the
//! helpers here, which only consume `next_u32`/`next_u64`.

use rand_pcg::rand_core::Rng;
use rand_pcg::Pcg32;
use sha2::{Digest, Sha256};

/// Default PCG32 stream increment.
const STREAM: u64 = 0x0a02_bdbf_7bb3_c0a7;

pub fn pcg(seed: u64) -> Pcg32 {
    Pcg32::new(seed, STREAM)
}

/// First 8 bytes of SHA-256, little endian.
pub fn stable_hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

/// Derives an independent seed for a named sub-stream.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut buf = seed.to_le_bytes().to_vec();
    buf.extend_from_slice(label.as_bytes());
    stable_hash64(&buf)
}

/// Uniform integer in `0..n` by rejection.
pub fn below(rng: &mut impl Rng, n: u32) -> u32 {
    assert!(n > 0);
    let zone = u32::MAX - (u32::MAX - n + 1) % n;
    loop {
        let x = rng.next_u32();
        if x <= zone {
            return x % n;
        }
    }
}

/// Uniform float in `[0, 1)` with 53 bits of precision.
pub fn unit(rng: &mut impl Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut impl Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, (i + 1) as u32) as usize;
        items.swap(i, j);
    }
}

/// Index drawn from a discrete distribution (weights need not sum to one).
pub fn categorical(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = unit(rng) * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}
