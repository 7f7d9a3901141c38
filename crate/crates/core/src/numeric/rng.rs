//! Seeded, splittable random streams.
//!
//! Every consumer draws from its own named substream ("init", "dropout",
//! "data", "split"), so consuming more numbers in one place never shifts
//! the sequence seen by another.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const INIT: &str = "init";
pub const DROPOUT: &str = "dropout";
pub const DATA: &str = "data";
pub const SPLIT: &str = "split";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(state, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    path: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_path(seed, FNV_OFFSET)
    }

    fn with_path(seed: u64, path: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(path);
        Self { seed, path, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; depends only on the seed and the name path,
    /// never on how much of `self` has been consumed.
    pub fn split(&self, name: &str) -> Rng {
        let path = fnv1a(fnv1a(self.path, b"/"), name.as_bytes());
        Self::with_path(self.seed, path)
    }

    /// Child stream keyed by a name and an index, e.g. one per epoch.
    pub fn split_indexed(&self, name: &str, index: u64) -> Rng {
        let path = fnv1a(self.split(name).path, &index.to_le_bytes());
        Self::with_path(self.seed, path)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Lemire's multiply-shift with rejection, unbiased.
        let n64 = n as u64;
        loop {
            let x = self.inner.next_u64();
            let m = (x as u128) * (n64 as u128);
            let low = m as u64;
            if low >= n64.wrapping_neg() % n64 {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
