use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Counter-based random stream.
///
/// Backed by ChaCha8, whose output is a pure function of `(seed, stream,
/// word position)`. `counter` is the 32-bit word position, so any draw can be
/// addressed directly with [`Rng::at`] without replaying earlier draws.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream positioned at word `counter`.
    pub fn at(seed: u64, counter: u64) -> Self {
        let mut rng = Self::new(seed);
        rng.inner.set_word_pos(counter as u128);
        rng
    }

    /// Independent substream keyed by `stream` (same seed, different nonce).
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut rng = Self::new(seed);
        rng.inner.set_stream(stream);
        rng
    }

    /// Substream keyed by a tuple of identifiers, e.g. `(kind, index)`.
    pub fn keyed(seed: u64, keys: &[u64]) -> Self {
        let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
        for &k in keys {
            h = splitmix(h ^ k);
        }
        Self::substream(seed, h)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. Rejection sampling keeps it unbiased.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.inner.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// `amount` distinct indices from `[0, n)`, in selection order
    /// (partial Fisher-Yates).
    pub fn sample_distinct(&mut self, n: usize, amount: usize) -> Vec<usize> {
        assert!(amount <= n, "cannot draw {amount} distinct values from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..amount {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(amount);
        pool
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

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
