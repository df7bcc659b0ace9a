//! TaylorShift attention and a pixel-wise windowed super-resolution
//! transformer, with the numerics, metrics and benchmark tooling needed to
//! check them.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! below name the two concrete instantiations.

pub mod attention;
pub mod bench;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod scalar;
pub mod verify;
pub mod windowing;

pub use error::{Error, Result};
pub use numerics::{AllocCounter, Tape, Tensor, Var};
pub use scalar::Real;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Var32 = Var<f32>;
pub type Var64 = Var<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
