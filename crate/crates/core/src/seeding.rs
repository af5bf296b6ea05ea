//! Stable per-entity seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from
//! `(global seed, entity labels)`, so adding entities or changing the worker
//! count never perturbs the streams of existing entities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A label component of a derived seed.
pub trait SeedPart {
    fn feed(&self, h: &mut u64);
}

fn feed_bytes(h: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *h ^= u64::from(b);
        *h = h.wrapping_mul(FNV_PRIME);
    }
    // separator so ("ab","c") != ("a","bc")
    *h ^= 0xff;
    *h = h.wrapping_mul(FNV_PRIME);
}

impl SeedPart for str {
    fn feed(&self, h: &mut u64) {
        feed_bytes(h, self.as_bytes());
    }
}

impl SeedPart for String {
    fn feed(&self, h: &mut u64) {
        feed_bytes(h, self.as_bytes());
    }
}

impl SeedPart for u64 {
    fn feed(&self, h: &mut u64) {
        feed_bytes(h, &self.to_le_bytes());
    }
}

impl SeedPart for usize {
    fn feed(&self, h: &mut u64) {
        (*self as u64).feed(h);
    }
}

impl<T: SeedPart + ?Sized> SeedPart for &T {
    fn feed(&self, h: &mut u64) {
        (**self).feed(h);
    }
}

/// Derive a child seed from a base seed and a sequence of labels.
pub fn derive_seed(base: u64, parts: &[&dyn SeedPart]) -> u64 {
    let mut h = FNV_OFFSET ^ splitmix64(base);
    for p in parts {
        p.feed(&mut h);
    }
    splitmix64(h)
}

pub fn rng_for(base: u64, parts: &[&dyn SeedPart]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}
