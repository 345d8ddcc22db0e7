//! Seeded randomness.
//!
//! Every random draw in the simulator comes from [`Prng`], which is PCG32
//! (`Lcg64Xsh32`: 64-bit LCG state, XSH-RR output permutation), seeded with
//! [`SeedableRng::seed_from_u64`]. Independent streams are derived with
//! [`child_seed`] so that, for example, one client's batch sampling does not
//! depend on which other clients were picked in the same round.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

pub type Prng = rand_pcg::Pcg32;

/// Stream tags mixed into [`child_seed`].
pub mod stream {
    pub const ENCODER: u64 = 0x454e_4344;
    pub const WORLD: u64 = 0x574f_524c;
    pub const PARTITION: u64 = 0x5041_5254;
    pub const INIT: u64 = 0x494e_4954;
    pub const SAMPLE: u64 = 0x5341_4d50;
    pub const CLIENT: u64 = 0x434c_4e54;
}

pub fn prng(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes an ordered list of words into a seed for an independent stream.
pub fn child_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9e37_79b9_7f4a_7c15, |acc, &p| {
        mix(acc.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ mix(p))
    })
}

pub fn gaussian(rng: &mut Prng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian_vec(rng: &mut Prng, len: usize, std: f64) -> Vec<f64> {
    (0..len).map(|_| std * gaussian(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn child_seeds_depend_on_every_part_and_order() {
        let a = child_seed(&[1, 2, 3]);
        assert_eq!(a, child_seed(&[1, 2, 3]));
        assert_ne!(a, child_seed(&[1, 2, 4]));
        assert_ne!(a, child_seed(&[3, 2, 1]));
        assert_ne!(child_seed(&[0]), child_seed(&[0, 0]));
    }

    #[test]
    fn streams_are_reproducible() {
        let mut a = prng(7);
        let mut b = prng(7);
        assert_eq!(gaussian_vec(&mut a, 16, 1.0), gaussian_vec(&mut b, 16, 1.0));
    }
}
