//! Deterministic random stream derivation.
//!
//! Every stochastic site in the library draws from a ChaCha8 stream keyed by
//! the experiment seed plus a list of tag words naming the site (purpose,
//! epoch, window index, ...). Streams for different tag lists are
//! independent, and the same (seed, tags) pair always reproduces the same
//! sequence regardless of what other streams were consumed in between.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const TAG_PARAM_INIT: u64 = 1;
pub const TAG_SYNTH: u64 = 2;
pub const TAG_SHUFFLE: u64 = 3;
pub const TAG_BLUR: u64 = 4;
pub const TAG_EVAL: u64 = 5;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha8 stream from a seed and a tag path.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0xA076_1D64_78BD_642F;
    for &t in tags {
        let mixed = splitmix64(&mut state);
        state = mixed ^ t.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Draw `n` independent standard normal values.
pub fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
