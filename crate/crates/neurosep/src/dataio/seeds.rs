//! Counter-based RNG stream derivation.
//!
//! Every random draw in the crate flows from one root seed through
//! `rng_for(root, &[tags...])`, so parallel workers and re-runs produce
//! identical results regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Stream-purpose tags (first element of the tag path).
pub const TAG_SYNTH: u64 = 1;
pub const TAG_SPLIT: u64 = 2;
pub const TAG_TRAIN_WINDOW: u64 = 3;
pub const TAG_EVAL_WINDOW: u64 = 4;
pub const TAG_INIT: u64 = 5;
pub const TAG_DROPOUT: u64 = 6;
pub const TAG_SHUFFLE: u64 = 7;
pub const TAG_BATCH: u64 = 8;
pub const TAG_JITTER: u64 = 9;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mixes a root seed with a tag path into a single 64-bit stream seed.
pub fn mix(root: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(root ^ 0x6a09e667f3bcc908);
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t));
    }
    state
}

/// Deterministic ChaCha stream for `(root, tags)`.
pub fn rng_for(root: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(root, tags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = rng_for(7, &[TAG_SYNTH, 0, 3]);
        let mut b = rng_for(7, &[TAG_SYNTH, 0, 3]);
        let mut c = rng_for(7, &[TAG_SYNTH, 0, 4]);
        let xs: Vec<u64> = (0..8).map(|_| a.gen()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.gen()).collect();
        let zs: Vec<u64> = (0..8).map(|_| c.gen()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn tag_order_matters() {
        assert_ne!(mix(1, &[2, 3]), mix(1, &[3, 2]));
        assert_ne!(mix(1, &[2]), mix(2, &[1]));
    }
}
