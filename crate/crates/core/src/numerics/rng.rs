//! Seeded, splittable random streams.
//!
//! A stream is identified by `(seed, stream_id)` and backed by a ChaCha
//! block cipher in counter mode, so each stream is reproducible on its own
//! no matter how many other streams are consumed or in which order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use super::cmatrix::Complex;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha12Rng,
}

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A child stream whose identity depends only on this stream's identity
    /// and `tag`, never on how much of this stream has been consumed.
    pub fn derive(&self, tag: u64) -> RngStream {
        let id = mix64(self.stream_id ^ mix64(tag.wrapping_add(0x51_7cc1_b727_220a)));
        RngStream::new(self.seed, id)
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// CN(0, 1): independent real and imaginary parts of variance 1/2.
    pub fn standard_complex_normal(&mut self) -> Complex {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let re = self.standard_normal() * s;
        let im = self.standard_normal() * s;
        Complex::new(re, im)
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

/// Free-function form of [`RngStream::standard_complex_normal`].
pub fn standard_complex_normal(rng: &mut RngStream) -> Complex {
    rng.standard_complex_normal()
}
