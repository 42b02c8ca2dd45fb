use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Counter-addressed random stream keyed by `(seed, tag)`.
///
/// The ChaCha20 key is derived from the seed and a stable hash of the tag, so two
/// streams with different tags never share a keystream, and any position can be
/// reached directly with [`RngStream::at`].
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    tag: String,
    inner: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, tag: &str) -> Self {
        Self::at(seed, tag, 0)
    }

    /// Stream positioned `counter` 32-bit words into the keystream.
    pub fn at(seed: u64, tag: &str, counter: u64) -> Self {
        let mut inner = ChaCha20Rng::from_seed(derive_key(seed, tag));
        inner.set_word_pos(counter as u128);
        Self {
            seed,
            tag: tag.to_owned(),
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[lo, hi]` (inclusive).
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        self.inner.random_range(lo..=hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }
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

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_key(seed: u64, tag: &str) -> [u8; 32] {
    let t = fnv1a(tag.as_bytes());
    let words = [seed, t, splitmix64(seed ^ t), splitmix64(t.rotate_left(17) ^ !seed)];
    let mut key = [0u8; 32];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    key
}

/// Derives a child seed from a parent seed and an index, e.g. one per training step.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}
