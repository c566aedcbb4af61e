//! Explicit, counter-based random streams.
//!
//! Every stochastic routine in the crate takes a `&mut RngStream` instead of
//! reaching for thread-local state. A stream is a ChaCha8 keystream selected by
//! a `(seed, stream id)` pair, so distinct ids never overlap.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Number of low bits reserved for a method index inside a trial stream id.
const METHOD_BITS: u32 = 16;

#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
    seed: u64,
    stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngStream {
            inner,
            seed,
            stream,
        }
    }

    /// Stream for `(trial, method)` in a Monte-Carlo study. Pairs map to distinct ids
    /// as long as `method < 2^16`.
    pub fn for_trial(seed: u64, trial: u64, method: u64) -> Self {
        assert!(method < (1 << METHOD_BITS), "method index out of range");
        RngStream::new(seed, (trial << METHOD_BITS) | method)
    }

    /// Independent child stream `k`, keyed by this stream's seed and id.
    pub fn child(&self, k: u64) -> Self {
        // Children live under a seed derived from the parent's identity; the
        // child index selects the ChaCha stream.
        let mixed = splitmix64(self.seed ^ splitmix64(self.stream.wrapping_add(0x9E37_79B9)));
        RngStream::new(mixed, k)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngCore for RngStream {
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

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_identity_same_sequence() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_streams_differ() {
        let mut a = RngStream::for_trial(1, 3, 0);
        let mut b = RngStream::for_trial(1, 3, 1);
        let mut c = RngStream::for_trial(1, 4, 0);
        let xa: f64 = a.random();
        let xb: f64 = b.random();
        let xc: f64 = c.random();
        assert_ne!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn children_are_deterministic_and_distinct() {
        let parent = RngStream::new(9, 2);
        let mut c0 = parent.child(0);
        let mut c0b = parent.child(0);
        let mut c1 = parent.child(1);
        assert_eq!(c0.next_u64(), c0b.next_u64());
        assert_ne!(parent.child(0).next_u64(), c1.next_u64());
    }
}
