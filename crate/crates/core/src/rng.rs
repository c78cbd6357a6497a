//! Deterministic random streams.
//!
//! Every random choice in the crate flows from one root seed through
//! [`derive_rng`]: the seed and a list of stream tags (purpose word, epoch,
//! batch, slot, ...) are mixed into a single key that seeds a ChaCha8 stream.
//! Streams with different tags are independent; the same tags always
//! reproduce the same stream, which is what makes checkpoint resume and
//! rerun byte-equality work.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; stable mixing for stream-key derivation.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a string tag (FNV-1a).
pub fn tag(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Derives a seeded stream from the root seed and a list of tags.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut key = mix(seed);
    for t in tags {
        key = mix(key ^ mix(*t));
    }
    ChaCha8Rng::seed_from_u64(key)
}
