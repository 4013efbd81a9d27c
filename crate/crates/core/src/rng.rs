//! Deterministic stream derivation.
//!
//! Every random draw in the simulator comes from a stream derived as
//! `derive_rng(master_seed, &[purpose, id_0, id_1, ...])`. Because the stream
//! is keyed by *logical* coordinates (worker id, step, chunk) rather than by
//! call order, the sampled sequences do not change with the number of workers
//! iterated before this one, with thread count, or with evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams. First element of every tag tuple.
pub mod stream {
    /// Synthetic dataset generation (features, planted weights, label noise).
    pub const DATA: u64 = 1;
    /// Per-(worker, step) minibatch sampling.
    pub const GRADIENT: u64 = 2;
    /// Worker-side codec randomness, keyed by (step, worker, chunk).
    pub const CODEC_WORKER: u64 = 3;
    /// Server-side codec randomness, keyed by (step, chunk).
    pub const CODEC_SERVER: u64 = 4;
    /// Model initialization.
    pub const INIT: u64 = 5;
    /// Post-run gradient-variance probe.
    pub const SIGMA_PROBE: u64 = 6;
    /// Verification suites.
    pub const VERIFY: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha8 stream from a master seed and a tag tuple.
///
/// Distinct tag tuples give (for all practical purposes) independent streams;
/// the same tuple always gives the same stream.
pub fn derive_rng(master_seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(master_seed);
    for &tag in tags {
        state = splitmix64(state ^ splitmix64(tag));
    }
    let mut key = [0u8; 32];
    let mut word = state;
    for chunk in key.chunks_exact_mut(8) {
        word = splitmix64(word);
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_tags_same_stream() {
        let mut a = derive_rng(42, &[stream::GRADIENT, 3, 17]);
        let mut b = derive_rng(42, &[stream::GRADIENT, 3, 17]);
        for _ in 0..16 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn different_tags_diverge() {
        let mut a = derive_rng(42, &[stream::GRADIENT, 3, 17]);
        let mut b = derive_rng(42, &[stream::GRADIENT, 3, 18]);
        let mut c = derive_rng(42, &[stream::CODEC_WORKER, 3, 17]);
        let xs: Vec<u64> = (0..8).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.random()).collect();
        let zs: Vec<u64> = (0..8).map(|_| c.random()).collect();
        assert_ne!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn tag_list_is_not_flattened() {
        // [1, 2] and [2, 1] must key different streams.
        let mut a = derive_rng(7, &[1, 2]);
        let mut b = derive_rng(7, &[2, 1]);
        assert_ne!(a.random::<u64>(), b.random::<u64>());
    }
}
