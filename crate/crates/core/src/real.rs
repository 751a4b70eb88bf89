use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::{Float, FloatConst};

/// Floating-point element type of tensors. Training runs in `f32`; gradient
/// oracles run the same code in `f64`.
pub trait Real:
    Float + FloatConst + Default + Debug + Display + Sum + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
