//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator. Child streams are derived from a
//! parent's *seed* and a label (never from its consumed state), so adding a
//! draw in one component does not shift the draws of another.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

/// Deterministic random stream.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Position in the underlying keystream (32-bit words consumed).
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Recreates a stream at a saved position.
    pub fn restore(seed: u64, word_pos: u128) -> Self {
        let mut r = Rng::new(seed);
        r.inner.set_word_pos(word_pos);
        r
    }

    /// Child stream identified by `label`.
    pub fn fork(&self, label: &str) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(fnv1a(label))))
    }

    /// Child stream identified by `label` and an index (head, epoch, batch...).
    pub fn fork_indexed(&self, label: &str, index: u64) -> Rng {
        Rng::new(splitmix64(
            self.seed ^ splitmix64(fnv1a(label)) ^ splitmix64(index.wrapping_add(0x5851_F42D)),
        ))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Draw from a symmetric-or-not Dirichlet via normalised Gamma variates.
    pub fn dirichlet(&mut self, alpha: &[f64]) -> Vec<f64> {
        let mut draws: Vec<f64> = alpha
            .iter()
            .map(|&a| {
                Gamma::new(a, 1.0)
                    .expect("dirichlet concentration must be positive")
                    .sample(&mut self.inner)
            })
            .collect();
        let total: f64 = draws.iter().sum();
        draws.iter_mut().for_each(|v| *v /= total);
        draws
    }
}
