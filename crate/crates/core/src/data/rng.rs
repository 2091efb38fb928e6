//! Seeded randomness shared by the generators and the pipeline.
//!
//! The generator is ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`), seeded
//! through `seed_from_u64`. Uniform `f64` draws take the top 53 bits of a
//! `u64` output scaled by 2⁻⁵³. Normal draws use the cosine branch of the
//! Box–Muller transform on two consecutive uniforms:
//! `z = sqrt(−2 ln(1 − a)) · cos(2π b)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type GeoRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> GeoRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, stream)`, e.g. one per ensemble member
/// and query id.
pub fn stream(seed: u64, stream: u64) -> GeoRng {
    seeded(splitmix64(seed ^ splitmix64(stream)))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let a = uniform(rng);
    let b = uniform(rng);
    (-2.0 * (1.0 - a).ln()).sqrt() * (std::f64::consts::TAU * b).cos()
}
