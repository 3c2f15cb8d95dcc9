//! Seeded random streams.
//!
//! Per-auction randomness comes from independent ChaCha streams keyed by
//! `(seed, domain)` and indexed by the auction ordinal, so results do not
//! depend on how auctions are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const DOMAIN_SHUFFLE: u64 = 0x5348_5546;
pub(crate) const DOMAIN_BATCH: u64 = 0x4241_5443;
pub(crate) const DOMAIN_EVAL: u64 = 0x4556_414c;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn derive(seed: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ domain.rotate_left(17)) ^ index)
}

#[derive(Debug, Clone)]
pub(crate) struct StreamFamily {
    base: ChaCha8Rng,
}

impl StreamFamily {
    pub(crate) fn new(seed: u64, domain: u64) -> Self {
        StreamFamily {
            base: ChaCha8Rng::seed_from_u64(derive(seed, domain, 0)),
        }
    }

    pub(crate) fn stream(&self, index: u64) -> ChaCha8Rng {
        let mut rng = self.base.clone();
        rng.set_stream(index);
        rng.set_word_pos(0);
        rng
    }
}
