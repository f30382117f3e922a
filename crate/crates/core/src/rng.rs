//! Seeded, keyed random streams.
//!
//! Every consumer of randomness (client selection, kernel sampling, batch
//! shuffling, data generation) draws from its own stream keyed by
//! `(round, client, layer)`, so results never depend on the order in which
//! concurrent work happens to run.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Key identifying an independent random stream under one experiment seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub round: u64,
    pub client: u64,
    pub layer: u64,
}

impl StreamKey {
    pub const fn new(round: u64, client: u64, layer: u64) -> Self {
        StreamKey { round, client, layer }
    }
}

/// Reserved `client` / `layer` key slots for streams that are not tied to a
/// particular client or layer.
pub mod domain {
    pub const CLIENT_SELECTION: u64 = u64::MAX;
    pub const DATA: u64 = u64::MAX - 1;
    pub const INIT: u64 = u64::MAX - 2;
    /// Batch shuffling uses `layer = SHUFFLE + epoch`.
    pub const SHUFFLE: u64 = 1 << 40;
    pub const AUGMENT: u64 = 1 << 41;
}

#[derive(Clone, Debug)]
pub struct RandomStream {
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64, key: StreamKey) -> Self {
        let mut bytes = [0u8; 32];
        bytes[0..8].copy_from_slice(&seed.to_le_bytes());
        bytes[8..16].copy_from_slice(&key.round.to_le_bytes());
        bytes[16..24].copy_from_slice(&key.client.to_le_bytes());
        bytes[24..32].copy_from_slice(&key.layer.to_le_bytes());
        RandomStream {
            rng: ChaCha8Rng::from_seed(bytes),
        }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    /// `amount` distinct values from `0..n`, uniformly, in draw order.
    pub fn sample_indices(&mut self, n: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, n, amount).into_vec()
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
