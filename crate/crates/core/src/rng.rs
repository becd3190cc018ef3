//! Deterministic per-line random streams.
//!
//! Every attacked line gets its own generator, seeded from the run's global
//! seed, the translation direction and the line index. Lines can therefore be
//! processed in any order (or in parallel) and editing one line of a corpus
//! leaves the noise applied to every other line unchanged.
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng`), whose output stream
//! is fixed by its algorithm rather than by the `rand` release in use. The
//! 64-bit seed is derived as
//!
//! ```text
//! seed = mix(mix(mix(global_seed) ^ fnv1a64("src-tgt")) ^ line_index)
//! ```
//!
//! where `mix` is the SplitMix64 finalizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used for all attack sampling.
pub type LineRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// SplitMix64 output function.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the UTF-8 bytes of `s`. Stable across platforms and releases.
pub fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Stream id of a direction label such as `"fr-en"`.
pub fn direction_id(label: &str) -> u64 {
    fnv1a64(label)
}

pub fn line_seed(global_seed: u64, direction_id: u64, line_index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(global_seed) ^ direction_id) ^ line_index)
}

pub fn line_rng(global_seed: u64, direction_id: u64, line_index: u64) -> LineRng {
    LineRng::seed_from_u64(line_seed(global_seed, direction_id, line_index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn splitmix_reference_values() {
        // Reference outputs of SplitMix64 seeded with 0 (state advanced by the golden gamma).
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
        assert_eq!(splitmix64(0x9e37_79b9_7f4a_7c15), 0x6e78_9e6a_a1b9_65f4);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(""), FNV_OFFSET);
        assert_eq!(fnv1a64("a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let d = direction_id("fr-en");
        let a: Vec<u64> = (0..4)
            .map(|_| 0)
            .scan(line_rng(7, d, 3), |r, _| Some(r.next_u64()))
            .collect();
        let b: Vec<u64> = (0..4)
            .map(|_| 0)
            .scan(line_rng(7, d, 3), |r, _| Some(r.next_u64()))
            .collect();
        assert_eq!(a, b);
        assert_ne!(line_seed(7, d, 3), line_seed(7, d, 4));
        assert_ne!(line_seed(7, d, 3), line_seed(7, direction_id("de-en"), 3));
        assert_ne!(line_seed(7, d, 3), line_seed(8, d, 3));
    }
}
