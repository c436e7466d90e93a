//! Counter-addressed random streams.
//!
//! Every random draw in a run is taken from a ChaCha8 generator whose seed is
//! a hash of `(master seed, stream name, index, sub-index)`. Any step of any
//! stream can therefore be regenerated without replaying the steps before it,
//! and two components never share a generator by accident.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(name: &str) -> u64 {
    name.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed for one cell of a named stream.
pub fn derive_seed(master: u64, stream: &str, index: u64, sub: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ fnv1a(stream));
    h = splitmix64(h ^ index);
    splitmix64(h ^ sub.rotate_left(32))
}

/// Generator for one cell of a named stream.
pub fn stream_rng(master: u64, stream: &str, index: u64, sub: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index, sub))
}

/// Draws an index from unnormalised non-negative `weights` by inverse CDF.
///
/// Falls back to the last index with positive mass when rounding pushes the
/// target past the running sum.
pub fn sample_categorical<R: rand::Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}
