//! Reproducible randomization stream.
//!
//! A ChaCha8 keystream addressed by `(seed, stream, word position)`; saving
//! those three integers is enough to resume the exact same sequence.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone)]
pub struct CounterRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

/// Serialized position of a [`CounterRng`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngPosition {
    pub seed: u64,
    pub stream: u64,
    /// 32-bit words consumed so far.
    pub words: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn at(position: RngPosition) -> Self {
        let mut rng = Self::new(position.seed, position.stream);
        rng.inner.set_word_pos(position.words as u128);
        rng
    }

    pub fn position(&self) -> RngPosition {
        RngPosition {
            seed: self.seed,
            stream: self.stream,
            words: self.inner.get_word_pos() as u64,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw from the open interval (0, 1) on the 2⁻⁵³ grid.
    pub fn uniform_open(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `1..=n` (Lemire's method without bias).
    pub fn rank(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.inner.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64 + 1;
            }
        }
    }

    pub fn inner_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}

impl Serialize for CounterRng {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.position().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CounterRng {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        RngPosition::deserialize(deserializer).map(Self::at)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resumes_from_position() {
        let mut a = CounterRng::new(7, 3);
        for _ in 0..37 {
            a.uniform_open();
        }
        a.rank(11);
        let mut b = CounterRng::at(a.position());
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let json = serde_json::to_string(&a).unwrap();
        let mut c: CounterRng = serde_json::from_str(&json).unwrap();
        assert_eq!(a.uniform_open(), c.uniform_open());
    }

    #[test]
    fn streams_differ() {
        let mut a = CounterRng::new(7, 0);
        let mut b = CounterRng::new(7, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_is_open_and_ranks_in_range() {
        let mut r = CounterRng::new(1, 0);
        let mut hist = [0u32; 5];
        for _ in 0..50_000 {
            let u = r.uniform_open();
            assert!(u > 0.0 && u < 1.0);
            let k = r.rank(5);
            assert!((1..=5).contains(&k));
            hist[k as usize - 1] += 1;
        }
        assert!(hist.iter().all(|&h| (h as f64 - 10_000.0).abs() < 500.0));
    }
}
