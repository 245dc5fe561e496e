//! Deterministic derivation of independent RNG streams.
//!
//! Every source of randomness in a run is a [`ChaCha8Rng`] seeded from the
//! experiment seed plus a domain label and up to two indices (round, client,
//! ...). Streams are independent of thread count and of the order in which
//! they are created, which is what makes runs reproducible under `rayon`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Derives a reproducible RNG for `(seed, domain, a, b)`.
pub fn stream_rng(seed: u64, domain: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut state = seed
        ^ fnv1a(domain.as_bytes())
            .wrapping_mul(0x2545_f491_4f6c_dd1d);
    state = state.wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    state = state.wrapping_add(b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f));
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
