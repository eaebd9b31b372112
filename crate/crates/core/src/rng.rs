//! Deterministic random number streams.
//!
//! Every stochastic component draws from a stream derived from the single
//! root seed and a stable name (for example `"gqrm/tau=0.50"` or
//! `"synth/latent/year=3"`). Streams are independent of execution order and
//! thread count, which is what makes whole-pipeline reruns byte-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// 64-bit FNV-1a over the stream name, mixed with the root seed.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 step; used to expand (seed, name-hash) into 32 key bytes.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the named substream for `(root_seed, name)`.
pub fn substream(root_seed: u64, name: &str) -> ChaCha20Rng {
    let mut state = root_seed ^ fnv1a64(name.as_bytes());
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha20Rng::from_seed(key)
}
