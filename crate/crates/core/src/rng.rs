//! Deterministic random streams.
//!
//! Every random quantity is drawn from a ChaCha8 stream keyed by the run seed and
//! a small tuple of integers (trial, grid point, ...). Distress signals get one
//! stream per user so that a user's draws never depend on what other users did,
//! or on which thread ran the trial.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a seed and a key path into a single 64-bit seed.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix(seed), |acc, &k| splitmix(acc ^ splitmix(k)))
}

/// A generator for the given seed and key path.
pub fn keyed_rng(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, keys))
}

/// Lazily created per-user streams sharing one derived key.
#[derive(Debug, Clone)]
pub struct UserStreams {
    base: u64,
    streams: Vec<Option<ChaCha8Rng>>,
}

impl UserStreams {
    pub fn new(seed: u64, keys: &[u64]) -> Self {
        UserStreams {
            base: derive_seed(seed, keys),
            streams: Vec::new(),
        }
    }

    /// The stream owned by `user`.
    pub fn stream(&mut self, user: usize) -> &mut ChaCha8Rng {
        if self.streams.len() <= user {
            self.streams.resize(user + 1, None);
        }
        let base = self.base;
        self.streams[user].get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(base);
            rng.set_stream(user as u64);
            rng
        })
    }
}
