//! Deterministic random substreams.
//!
//! Every random decision in a run is drawn from a [`Stream`] whose seed is
//! derived from the master seed through a chain of labels, so results never
//! depend on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Open a stream for a fully derived seed.
pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a child seed identified by a textual label.
pub fn derive(parent: u64, label: &str) -> u64 {
    mix64(parent ^ mix64(fnv1a64(label.as_bytes()) ^ 0x94D0_49BB_1331_11EB))
}

/// Derive a child seed identified by an integer index.
pub fn derive_index(parent: u64, index: u64) -> u64 {
    mix64(parent.wrapping_add(0x9E37_79B9_7F4A_7C15) ^ mix64(index ^ 0xD134_2543_DE82_EF95))
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derive_is_deterministic() {
        let a = derive(42, "exposure");
        assert_eq!(a, derive(42, "exposure"));
        assert_ne!(a, derive(42, "replay"));
        assert_ne!(derive_index(a, 1), derive_index(a, 2));
    }

    #[test]
    fn streams_replay_identically() {
        let mut s1 = stream(derive(7, "x"));
        let mut s2 = stream(derive(7, "x"));
        for _ in 0..100 {
            assert_eq!(s1.random::<u64>(), s2.random::<u64>());
        }
    }
}
