//! Counter-based deterministic randomness.
//!
//! Every random draw in the engine comes from a stream addressed by
//! `(seed, stream id)`. A stream's output depends only on its address and
//! how far into it one has read, never on what other streams did, so
//! parallel data pipelines reproduce sequential ones exactly.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Purpose tags mixed into stream ids so unrelated consumers never collide.
pub mod tag {
    pub const INIT: u64 = 0x494e_4954;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const AUGMENT: u64 = 0x4155_474d;
    pub const MIXUP: u64 = 0x4d49_5855;
    pub const SYNTH: u64 = 0x5359_4e54;
    pub const SUBSAMPLE: u64 = 0x5355_4253;
    pub const FINETUNE: u64 = 0x4654_554e;
    pub const HEAD: u64 = 0x4845_4144;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_hash(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x5333_4c5f_5354_524d, |h, &w| splitmix(h ^ splitmix(w)))
}

/// A random stream at address `(seed, stream id)`.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: Vec<u64>,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: &[u64]) -> Self {
        let mut key = [0u8; 32];
        let mut s = seed;
        for chunk in key.chunks_mut(8) {
            s = splitmix(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream_hash(stream));
        SeededRng {
            seed,
            stream: stream.to_vec(),
            inner,
        }
    }

    /// Child stream: same seed, this stream's id extended by `words`.
    pub fn derive(&self, words: &[u64]) -> Self {
        let mut id = self.stream.clone();
        id.extend_from_slice(words);
        SeededRng::new(self.seed, &id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> &[u64] {
        &self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn set_counter(&mut self, pos: u128) {
        self.inner.set_word_pos(pos);
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        p > 0.0 && self.uniform() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

impl RngCore for SeededRng {
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
