//! Seed derivation for reproducible, independently addressable random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Returns a ChaCha stream keyed by `seed` and a path of tags.
///
/// Distinct tag paths give statistically independent streams, so callers can
/// split work (per scene, per parameter, per epoch) without threading a single
/// generator through everything.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed;
    for &t in tags {
        state = splitmix64(&mut state) ^ t.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stable 64-bit tag for a string label (FNV-1a).
pub fn tag(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = derive_rng(7, &[1, 2]).gen();
        let b: u64 = derive_rng(7, &[1, 2]).gen();
        let c: u64 = derive_rng(7, &[2, 1]).gen();
        let d: u64 = derive_rng(8, &[1, 2]).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
