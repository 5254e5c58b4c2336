// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded randomness.
//!
//! Every random draw in the crate comes from [`Pcg64`] (PCG XSL-RR 128/64)
//! built by [`seeded`]: state = seed zero-extended to 128 bits, stream =
//! [`PCG_STREAM`]. Integer draws in `[0, n)` use the multiply-high map
//! `(x * n) >> 64` on a raw 64-bit output, so sequences are reproducible by
//! any implementation of the same generator.

use rand::Rng;
pub use rand_pcg::Pcg64;
use sha2::{Digest, Sha256};

/// Default increment of the PCG reference implementation.
pub const PCG_STREAM: u128 = 0x0a02_bdbf_7bb3_c0a7_ac28_fa16_a64a_bf96;

/// Builds the crate's generator for `seed`.
pub fn seeded(seed: u64) -> Pcg64 {
    Pcg64::new(u128::from(seed), PCG_STREAM)
}

/// Derives an independent sub-seed for a named stage.
///
/// First 8 bytes (little-endian) of `SHA-256(seed_le || name)`.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

/// Uniform integer in `[0, n)`. `n` must be positive.
pub fn below<R: Rng + ?Sized>(rng: &mut R, n: usize) -> usize {
    debug_assert!(n > 0);
    ((u128::from(rng.next_u64()) * n as u128) >> 64) as usize
}

/// Uniform real in `[0, 1)` with 53 random bits.
pub fn unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draw (Box-Muller, cosine branch).
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1 = 1.0 - unit(rng);
    let u2 = unit(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Partial Fisher-Yates: `k` distinct positions out of `0..n`, in draw order.
pub fn choose_distinct<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let k = k.min(n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + below(rng, n - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}
