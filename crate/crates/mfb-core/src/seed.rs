//! Deterministic seed derivation.
//!
//! Every random stream in the crate is derived from one root seed and a text
//! label (e.g. `"train:K=6:upper"`). Labels make sub-streams independent of
//! execution order, so results do not change with the thread count, and a
//! fixed (root, label) pair reproduces the same stream forever.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// FNV-1a over the root seed bytes and the label, then a splitmix64 finalizer
/// for dispersion. Stable across platforms and releases.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    for byte in root.to_le_bytes() {
        h = (h ^ u64::from(byte)).wrapping_mul(FNV_PRIME);
    }
    for byte in label.as_bytes() {
        h = (h ^ u64::from(*byte)).wrapping_mul(FNV_PRIME);
    }
    splitmix64(splitmix64(h))
}

/// Seeded RNG for a labeled sub-stream.
pub fn rng_for(root: u64, label: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(root, label))
}

fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
