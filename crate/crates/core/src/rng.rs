//! Counter-based randomness.
//!
//! Every Bernoulli variable ω(x) is a pure function of (seed, x): the ChaCha
//! stream is selected by the packed site coordinates. Resampling a subset of
//! sites, or realising regions in a different order, never shifts the values
//! drawn elsewhere.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lattice::Site;

const TRIAL_DOMAIN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Injective packing of a site into 64 bits (zigzag, 64/d bits per axis).
pub fn site_key(x: &Site) -> u64 {
    let d = x.dim();
    let bits = 64 / d as u32;
    let mut key = 0u64;
    for &c in x.coords() {
        if bits < 64 {
            let limit = 1i64 << (bits - 1);
            assert!(-limit <= c && c < limit, "coordinate {c} does not fit the {bits}-bit site key");
        }
        let z = ((c << 1) ^ (c >> 63)) as u64;
        key = if bits == 64 { z } else { (key << bits) | z };
    }
    key
}

#[derive(Clone)]
pub struct SiteStream {
    base: ChaCha8Rng,
}

impl SiteStream {
    pub fn new(seed: u64) -> SiteStream {
        SiteStream { base: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn word(&self, key: u64) -> u32 {
        let mut rng = self.base.clone();
        rng.set_stream(key);
        rng.set_word_pos(0);
        rng.next_u32()
    }

    pub fn bit(&self, x: &Site) -> u8 {
        (self.word(site_key(x)) & 1) as u8
    }

    /// Uniform value in [0, 1) attached to a site.
    pub fn uniform(&self, x: &Site) -> f64 {
        let mut rng = self.base.clone();
        rng.set_stream(site_key(x));
        rng.set_word_pos(0);
        (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Derived seed for trial `index`; distinct indices give unrelated streams.
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ TRIAL_DOMAIN);
    rng.set_stream(index);
    rng.next_u64()
}

/// Sequential generator for auxiliary sampling (random matrices, parameters).
pub fn trial_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_seed(seed, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_injective_on_a_cube() {
        let mut seen = std::collections::HashSet::new();
        for a in -5..=5 {
            for b in -5..=5 {
                for c in -5..=5 {
                    assert!(seen.insert(site_key(&Site::new(&[a, b, c]))));
                }
            }
        }
        assert_ne!(site_key(&Site::new(&[1])), site_key(&Site::new(&[-1])));
    }

    #[test]
    fn bits_are_reproducible_and_seed_dependent() {
        let s = SiteStream::new(7);
        let t = SiteStream::new(8);
        let xs: Vec<Site> = (0..64).map(|i| Site::new(&[i, -i])).collect();
        let a: Vec<u8> = xs.iter().map(|x| s.bit(x)).collect();
        let b: Vec<u8> = xs.iter().map(|x| SiteStream::new(7).bit(x)).collect();
        let c: Vec<u8> = xs.iter().map(|x| t.bit(x)).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(split_seed(1, 0), split_seed(1, 1));
    }
}
