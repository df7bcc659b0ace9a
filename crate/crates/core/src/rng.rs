//! Seeded random tensors. All sampling goes through f64 so an f32 and an
//! f64 tensor drawn from the same seed hold the same values up to rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::numerics::Tensor;
use crate::scalar::Real;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tensor of i.i.d. N(0, 1) samples.
pub fn randn<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Result<Tensor<T>> {
    Tensor::from_fn(shape, |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Tensor of i.i.d. U[lo, hi) samples.
pub fn uniform<T: Real>(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Result<Tensor<T>> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
}
