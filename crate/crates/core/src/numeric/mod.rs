//! Dense numeric substrate: tensors, layers with hand-derived gradients,
//! AdamW and the cosine learning-rate schedule.

mod layers;
mod optim;
mod tensor;

pub use layers::{gelu, gelu_grad, Gelu, Init, Linear, Mlp2, Parameter};
pub use optim::{AdamW, AdamWConfig, CosineSchedule};
pub use tensor::{Real, Tensor};
pub(crate) use tensor::debug_check_finite;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

/// Every random draw in the crate comes from this generator.
pub type SeededRng = Xoshiro256PlusPlus;

pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, stable for large `|x|`.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
