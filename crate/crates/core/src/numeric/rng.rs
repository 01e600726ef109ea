use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use super::{Real, Tensor};
use crate::error::Result;

/// Identifier of the stream generator: ChaCha20 keyed by the 64-bit seed,
/// normals drawn in f64 with the ziggurat sampler of `rand_distr`.
pub const RNG_ALGORITHM: &str = "chacha20-ziggurat";

/// Seeded, platform-independent random stream.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent sub-stream of the same seed, e.g. one per dataset item.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    /// Deterministically derived child generator; `label` separates
    /// unrelated consumers of the same seed.
    pub fn fork(&self, label: u64) -> Self {
        Self::with_stream(
            self.seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(label.wrapping_add(1)),
            self.stream,
        )
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_in(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

/// I.i.d. standard-normal tensor of the given shape.
pub fn gaussian<T: Real>(rng: &mut Rng, shape: &[usize]) -> Result<Tensor<T>> {
    let mut t = Tensor::<T>::zeros(shape)?;
    for x in t.data_mut() {
        *x = T::from_f64(rng.normal());
    }
    Ok(t)
}
