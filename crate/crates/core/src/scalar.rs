use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating-point element type shared by every tensor, kernel and model.
///
/// Implemented for `f32` (benchmarks, CLI inference) and `f64` (verification
/// suites, gradient checks).
pub trait Real:
    Float + FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Short dtype tag used in reports and checkpoint headers.
    const NAME: &'static str;

    /// Converts a literal. Every `f64` is representable (possibly rounded) in both impls.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }

    #[inline]
    fn half() -> Self {
        Self::lit(0.5)
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn half() -> Self {
        0.5
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn half() -> Self {
        0.5
    }
}
