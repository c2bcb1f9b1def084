//! Seeding scheme for reproducible replicates.
//!
//! Replicate `i` of a run with seed `s` uses ChaCha8 keyed by `s` on stream
//! `i`, so results do not depend on how replicates are spread over threads.

use rand::{Rng, SeedableRng};
pub use rand_chacha::ChaCha8Rng;

pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// Sub-seed for an independent component of a run (e.g. the two sides of a
/// comparison). Mixes with splitmix64 so nearby labels give unrelated keys.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    let mut z = seed ^ label.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Exp(rate) by inversion.
#[inline]
pub fn exponential<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    let u: f64 = rng.random();
    -crate::math::ln_1p(-u) / rate
}

/// Uniform on (0, 1].
#[inline]
pub fn open01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}
