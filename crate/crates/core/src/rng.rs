//! Counter-based random streams.
//!
//! Every random draw in the lab comes from a ChaCha stream whose seed is a
//! hash of an ordered key tuple (run seed, purpose tag, ids...). Streams are
//! therefore independent of scheduling and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Purpose tags keep streams for different uses disjoint.
pub mod tag {
    pub const WORLD: u64 = 0x5752_4c44;
    pub const PAIR: u64 = 0x5041_4952;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const PRETRAIN: u64 = 0x5052_4554;
    pub const EVAL: u64 = 0x4556_414c;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const INIT: u64 = 0x494e_4954;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes an ordered key tuple into a 256-bit ChaCha seed.
pub fn keyed_seed(keys: &[u64]) -> [u8; 32] {
    let mut acc = [
        0x243f_6a88_85a3_08d3u64,
        0x1319_8a2e_0370_7344,
        0xa409_3822_299f_31d0,
        0x082e_fa98_ec4e_6c89,
    ];
    for (i, &k) in keys.iter().enumerate() {
        for (lane, a) in acc.iter_mut().enumerate() {
            *a = splitmix64(*a ^ k.wrapping_add((i as u64) << 8 | lane as u64));
        }
    }
    let mut out = [0u8; 32];
    for (lane, a) in acc.iter().enumerate() {
        out[lane * 8..lane * 8 + 8].copy_from_slice(&a.to_le_bytes());
    }
    out
}

/// A deterministic stream keyed by the given tuple.
pub fn stream(keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(keyed_seed(keys))
}

/// Draws `dim` standard normal values from `rng`.
pub fn standard_normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}
